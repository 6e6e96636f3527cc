//! Dynamic high-frequency convolution (DHiF) for infrared small-target
//! detection, implemented from scratch in Rust.
//!
//! The crate provides, bottom to top:
//!
//! * [`tensor`] — dense `f64` tensors, patch geometry, im2col/col2im, GEMM;
//! * [`rng`] — a contract-pinned deterministic random source;
//! * [`ops`] — standard layers with hand-written forward/backward passes
//!   (convolution, batch norm, activations, pooling, soft-IoU loss) plus the
//!   collapse-and-normalize step DHiF starts from;
//! * [`dhif`] — the dynamic high-frequency convolution operator itself:
//!   input-conditioned filter banks and the exact gradients through them;
//! * [`blocks`] / [`net`] / [`optim`] / [`train`] — residual blocks, a small
//!   encoder–decoder detector, Adam, and a deterministic training loop;
//! * [`freq`] — a DFT-based frequency analyzer for static kernels and for
//!   filter-bank dumps;
//! * [`metrics`] — pixel- and object-level detection metrics;
//! * [`synth`] / [`pgm`] — a synthetic infrared scene generator and 16-bit
//!   PGM I/O;
//! * [`config`] / [`checkpoint`] / [`gradcheck`] / [`cli`] — the plain-text
//!   config format, checkpoint archive, finite-difference audit, and the
//!   subcommand implementations behind the `dhif` binary.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dhif;
pub mod error;
pub mod freq;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod ops;
pub mod pgm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
