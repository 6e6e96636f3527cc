//! Standard network operators with exact hand-written gradients.
//!
//! Every layer follows the same shape: `forward` returns the output plus a
//! tape, `backward` consumes the tape by value (so it cannot be replayed)
//! and returns the input gradient plus parameter gradients summed over the
//! batch. Tapes remember which layer instance produced them; feeding a tape
//! to a different layer is a contract violation, not a silent wrong answer.
//!
//! Feature maps are `[N, C, H, W]`. Parameter gradients are accumulated
//! per-sample and reduced in sample order, so results do not depend on the
//! number of worker threads.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{
    col2im, im2col, matmul_a_bt, matmul_at_b, matmul_slices, ConvGeometry, Tensor,
};

/// Epsilon inside every `1/√(var + ε)` in this crate (collapse-normalize and
/// batch norm).
pub const NORM_EPS: f64 = 1e-5;

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Laplace-smoothing constant of the soft-IoU loss.
pub const IOU_SMOOTH: f64 = 1.0;

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_layer_id() -> u64 {
    NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn check_tape_owner(tape_layer: u64, this_layer: u64, what: &str) -> Result<()> {
    if tape_layer != this_layer {
        return Err(Error::ContractViolation(format!(
            "{what} backward received a tape from layer {tape_layer}, expected layer {this_layer}"
        )));
    }
    Ok(())
}

fn expect_shape(x: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if x.shape() != shape {
        return Err(Error::InvalidArgument(format!(
            "{what}: expected shape {shape:?}, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn expect_rank4(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "{what}: expected a [N, C, H, W] tensor, got {:?}",
            x.shape()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Pointwise nonlinearities. `Identity` exists so "no nonlinearity" is a
/// configuration value rather than a special case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Gelu,
}

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    /// Derivative at `x`. The kink of the rectifiers is assigned the
    /// left-side value (0 resp. the leak slope).
    pub fn slope(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> (Tensor, ActTape) {
        let y = x.map(|v| self.value(v));
        (
            y,
            ActTape {
                input: x.clone(),
                activation: self,
            },
        )
    }

    pub fn backward(self, grad_y: &Tensor, tape: &ActTape) -> Result<Tensor> {
        if tape.activation != self {
            return Err(Error::ContractViolation(format!(
                "activation backward: tape was recorded by {:?}, not {self:?}",
                tape.activation
            )));
        }
        expect_shape(grad_y, tape.input.shape(), "activation backward")?;
        let mut grad = grad_y.clone();
        for (g, &x) in grad.data_mut().iter_mut().zip(tape.input.data()) {
            *g *= self.slope(x);
        }
        Ok(grad)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "none",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "none" | "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!(
                "unknown nonlinearity {other:?} (expected none, relu, leaky_relu, sigmoid, tanh or gelu)"
            ))),
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub struct ActTape {
    input: Tensor,
    activation: Activation,
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Plain 2-D convolution (cross-correlation) with square kernels and zero
/// padding. Weights live in im2col layout `[C_out, C_in · k²]`; the bias is
/// optional so conv-before-batch-norm layers carry no redundant parameters.
#[derive(Debug, Clone)]
pub struct Conv2d {
    id: u64,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub struct Conv2dTape {
    layer_id: u64,
    input: Tensor,
    out_shape: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
    ) -> Result<Conv2d> {
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::InvalidArgument(
                "conv2d needs at least one input and one output channel".into(),
            ));
        }
        if k == 0 || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel size must be odd and positive, got {k}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        Ok(Conv2d {
            id: next_layer_id(),
            in_ch,
            out_ch,
            k,
            stride,
            padding,
            weight: Tensor::zeros(&[out_ch, in_ch * k * k]),
            bias: if with_bias {
                Some(Tensor::zeros(&[out_ch]))
            } else {
                None
            },
        })
    }

    /// Kaiming-normal initialization: N(0, √(2 / fan_in)) with
    /// fan_in = C_in · k². Bias (if any) starts at zero.
    pub fn init_kaiming(&mut self, rng: &mut SeededRng) {
        let fan_in = (self.in_ch * self.k * self.k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = self.weight.len();
        let values = rng.fill_normal(n);
        for (w, v) in self.weight.data_mut().iter_mut().zip(values) {
            *w = std * v;
        }
        if let Some(b) = &mut self.bias {
            b.data_mut().fill(0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(self.in_ch, h, w, self.k, self.stride, self.padding)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Conv2dTape)> {
        let (n, c, h, w) = expect_rank4(x, "conv2d forward")?;
        if c != self.in_ch {
            return Err(Error::InvalidArgument(format!(
                "conv2d forward: layer expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let geom = self.geometry(h, w)?;
        let locations = geom.locations();
        let row_len = geom.patch_len();
        let sample_in = c * h * w;
        let sample_out = self.out_ch * locations;

        let planes: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut cols = vec![0.0; locations * row_len];
                im2col(&x.data()[i * sample_in..][..sample_in], &geom, &mut cols);
                // y_i[C_out, L] = W[C_out, C·k²] · cols[C·k², L]
                let mut y = vec![0.0; sample_out];
                matmul_slices(self.weight.data(), &cols, &mut y, self.out_ch, row_len, locations);
                if let Some(bias) = &self.bias {
                    for (co, &b) in bias.data().iter().enumerate() {
                        for v in &mut y[co * locations..(co + 1) * locations] {
                            *v += b;
                        }
                    }
                }
                y
            })
            .collect();

        let mut out = Vec::with_capacity(n * sample_out);
        for plane in planes {
            out.extend_from_slice(&plane);
        }
        let out_shape = [n, self.out_ch, geom.out_h, geom.out_w];
        Ok((
            Tensor::from_vec(&out_shape, out)?,
            Conv2dTape {
                layer_id: self.id,
                input: x.clone(),
                out_shape,
            },
        ))
    }

    pub fn backward(&self, grad_y: &Tensor, tape: Conv2dTape) -> Result<(Tensor, Conv2dGrads)> {
        check_tape_owner(tape.layer_id, self.id, "conv2d")?;
        expect_shape(grad_y, &tape.out_shape, "conv2d backward")?;
        let x = &tape.input;
        let (n, c, h, w) = expect_rank4(x, "conv2d backward")?;
        let geom = self.geometry(h, w)?;
        let locations = geom.locations();
        let row_len = geom.patch_len();
        let sample_in = c * h * w;
        let sample_out = self.out_ch * locations;

        struct Partial {
            grad_x: Vec<f64>,
            grad_w: Vec<f64>,
            grad_b: Vec<f64>,
        }

        let partials: Vec<Partial> = (0..n)
            .into_par_iter()
            .map(|i| {
                let gy = &grad_y.data()[i * sample_out..][..sample_out];
                let mut cols = vec![0.0; locations * row_len];
                im2col(&x.data()[i * sample_in..][..sample_in], &geom, &mut cols);

                // ∂L/∂W = g_y[C_out, L] · cols[C·k², L]ᵀ
                let mut grad_w = vec![0.0; self.out_ch * row_len];
                matmul_a_bt(gy, &cols, &mut grad_w, self.out_ch, locations, row_len);

                // ∂L/∂cols = Wᵀ[C·k², C_out] · g_y[C_out, L]
                let mut grad_cols = vec![0.0; locations * row_len];
                matmul_at_b(self.weight.data(), gy, &mut grad_cols, self.out_ch, row_len, locations);
                let mut grad_x = vec![0.0; sample_in];
                col2im(&grad_cols, &geom, &mut grad_x);

                let mut grad_b = vec![0.0; if self.bias.is_some() { self.out_ch } else { 0 }];
                if self.bias.is_some() {
                    for co in 0..self.out_ch {
                        grad_b[co] = gy[co * locations..(co + 1) * locations].iter().sum();
                    }
                }
                Partial { grad_x, grad_w, grad_b }
            })
            .collect();

        // Sample-ordered reduction keeps results independent of threading.
        let mut grad_x = Vec::with_capacity(n * sample_in);
        let mut grad_w = vec![0.0; self.out_ch * row_len];
        let mut grad_b = vec![0.0; if self.bias.is_some() { self.out_ch } else { 0 }];
        for p in partials {
            grad_x.extend_from_slice(&p.grad_x);
            for (acc, v) in grad_w.iter_mut().zip(&p.grad_w) {
                *acc += v;
            }
            for (acc, v) in grad_b.iter_mut().zip(&p.grad_b) {
                *acc += v;
            }
        }

        Ok((
            Tensor::from_vec(&[n, c, h, w], grad_x)?,
            Conv2dGrads {
                weight: Tensor::from_vec(&[self.out_ch, row_len], grad_w)?,
                bias: if self.bias.is_some() {
                    Some(Tensor::from_vec(&[self.out_ch], grad_b)?)
                } else {
                    None
                },
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Collapse-and-normalize
// ---------------------------------------------------------------------------

/// Collapse a `[C, H, W]` feature map to a single standardized plane: the
/// channel mean, shifted and scaled to zero mean and unit variance over the
/// spatial grid (`ε` = [`NORM_EPS`] inside the square root). This is the map
/// the dynamic filter generator looks at: it carries the spatial structure
/// of the features, stripped of channel count and overall gain, so the
/// generated filters depend on *where* energy varies, not on how many
/// channels the layer happens to have.
pub fn collapse_normalize(x: &Tensor) -> Result<(Tensor, CollapseTape)> {
    let shape = x.shape();
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "collapse_normalize expects a [C, H, W] map, got {shape:?}"
            )))
        }
    };
    let plane = h * w;
    let mut mean_map = vec![0.0; plane];
    for ch in 0..c {
        let src = &x.data()[ch * plane..][..plane];
        for (m, v) in mean_map.iter_mut().zip(src) {
            *m += v;
        }
    }
    let inv_c = 1.0 / c as f64;
    for m in &mut mean_map {
        *m *= inv_c;
    }
    let mu = mean_map.iter().sum::<f64>() / plane as f64;
    let var = mean_map.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / plane as f64;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    let f: Vec<f64> = mean_map.iter().map(|m| (m - mu) * inv_std).collect();
    Ok((
        Tensor::from_vec(&[h, w], f.clone())?,
        CollapseTape {
            channels: c,
            height: h,
            width: w,
            normalized: f,
            inv_std,
        },
    ))
}

pub struct CollapseTape {
    channels: usize,
    height: usize,
    width: usize,
    /// The normalized output plane; together with `inv_std` it is all the
    /// backward pass needs.
    normalized: Vec<f64>,
    inv_std: f64,
}

/// Exact gradient through [`collapse_normalize`]. The standardization makes
/// every output depend on every input pixel (through the spatial mean and
/// variance), which is why the formula carries the two correction terms.
pub fn collapse_normalize_backward(grad: &Tensor, tape: &CollapseTape) -> Result<Tensor> {
    expect_shape(grad, &[tape.height, tape.width], "collapse_normalize backward")?;
    let plane = tape.height * tape.width;
    let g = grad.data();
    let f = &tape.normalized;
    let g_mean = g.iter().sum::<f64>() / plane as f64;
    let gf_mean = g.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
    let scale = tape.inv_std / tape.channels as f64;
    let per_pixel: Vec<f64> = g
        .iter()
        .zip(f)
        .map(|(gi, fi)| scale * (gi - g_mean - fi * gf_mean))
        .collect();
    let mut out = Vec::with_capacity(tape.channels * plane);
    for _ in 0..tape.channels {
        out.extend_from_slice(&per_pixel);
    }
    Tensor::from_vec(&[tape.channels, tape.height, tape.width], out)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over `N × H × W` with learned gain and
/// shift. Training mode uses biased batch statistics and maintains running
/// estimates (momentum 0.1) that evaluation mode reads.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    id: u64,
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnTape {
    layer_id: u64,
    training: bool,
    xhat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Result<BatchNorm2d> {
        if channels == 0 {
            return Err(Error::InvalidArgument("batch norm needs at least one channel".into()));
        }
        Ok(BatchNorm2d {
            id: next_layer_id(),
            channels,
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: 0.1,
            eps: NORM_EPS,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<(Tensor, BnTape)> {
        let (n, c, h, w) = expect_rank4(x, "batch norm forward")?;
        if c != self.channels {
            return Err(Error::InvalidArgument(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let plane = h * w;
        let per_channel = n * plane;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_stds = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if training {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for i in 0..n {
                    let src = &x.data()[(i * c + ch) * plane..][..plane];
                    for &v in src {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / per_channel as f64;
                let var = (sq / per_channel as f64 - mean * mean).max(0.0);
                self.running_mean.data_mut()[ch] =
                    (1.0 - self.momentum) * self.running_mean.data()[ch] + self.momentum * mean;
                self.running_var.data_mut()[ch] =
                    (1.0 - self.momentum) * self.running_var.data()[ch] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean.data()[ch], self.running_var.data()[ch])
            };
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[ch] = inv_std;
            let gamma = self.gamma.data()[ch];
            let beta = self.beta.data()[ch];
            for i in 0..n {
                let offset = (i * c + ch) * plane;
                let src = &x.data()[offset..][..plane];
                for (j, &v) in src.iter().enumerate() {
                    let xh = (v - mean) * inv_std;
                    xhat[offset + j] = xh;
                    y[offset + j] = gamma * xh + beta;
                }
            }
        }
        Ok((
            Tensor::from_vec(&[n, c, h, w], y)?,
            BnTape {
                layer_id: self.id,
                training,
                xhat: Tensor::from_vec(&[n, c, h, w], xhat)?,
                inv_std: inv_stds,
            },
        ))
    }

    pub fn backward(&self, grad_y: &Tensor, tape: BnTape) -> Result<(Tensor, BnGrads)> {
        check_tape_owner(tape.layer_id, self.id, "batch norm")?;
        expect_shape(grad_y, tape.xhat.shape(), "batch norm backward")?;
        let (n, c, h, w) = expect_rank4(&tape.xhat, "batch norm backward")?;
        let plane = h * w;
        let per_channel = (n * plane) as f64;
        let mut grad_x = vec![0.0; grad_y.len()];
        let mut grad_gamma = vec![0.0; c];
        let mut grad_beta = vec![0.0; c];
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..n {
                let offset = (i * c + ch) * plane;
                let g = &grad_y.data()[offset..][..plane];
                let xh = &tape.xhat.data()[offset..][..plane];
                for (gv, xv) in g.iter().zip(xh) {
                    sum_g += gv;
                    sum_gx += gv * xv;
                }
            }
            grad_beta[ch] = sum_g;
            grad_gamma[ch] = sum_gx;
            let gamma = self.gamma.data()[ch];
            let inv_std = tape.inv_std[ch];
            if tape.training {
                // Batch statistics depend on the inputs, hence the two
                // mean-correction terms.
                let mean_g = sum_g / per_channel;
                let mean_gx = sum_gx / per_channel;
                for i in 0..n {
                    let offset = (i * c + ch) * plane;
                    for j in 0..plane {
                        let g = grad_y.data()[offset + j];
                        let xh = tape.xhat.data()[offset + j];
                        grad_x[offset + j] = gamma * inv_std * (g - mean_g - xh * mean_gx);
                    }
                }
            } else {
                for i in 0..n {
                    let offset = (i * c + ch) * plane;
                    for j in 0..plane {
                        grad_x[offset + j] = grad_y.data()[offset + j] * gamma * inv_std;
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(&[n, c, h, w], grad_x)?,
            BnGrads {
                gamma: Tensor::from_vec(&[c], grad_gamma)?,
                beta: Tensor::from_vec(&[c], grad_beta)?,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Pooling and upsampling
// ---------------------------------------------------------------------------

pub struct PoolTape {
    in_shape: [usize; 4],
    out_shape: [usize; 4],
    /// Flat input index of the winning element for every output element.
    argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Requires even spatial extents. Ties go to
/// the first element in row-major window order so the backward routing is
/// deterministic.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, PoolTape)> {
    let (n, c, h, w) = expect_rank4(x, "maxpool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2x2 needs even spatial extents, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; y.len()];
    for i in 0..n {
        for ch in 0..c {
            let in_base = (i * c + ch) * h * w;
            let out_base = (i * c + ch) * oh * ow;
            for r in 0..oh {
                for cc in 0..ow {
                    let mut best_idx = in_base + (2 * r) * w + 2 * cc;
                    let mut best = x.data()[best_idx];
                    for (dr, dc) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * r + dr) * w + (2 * cc + dc);
                        let v = x.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    y[out_base + r * ow + cc] = best;
                    argmax[out_base + r * ow + cc] = best_idx;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, oh, ow], y)?,
        PoolTape {
            in_shape: [n, c, h, w],
            out_shape: [n, c, oh, ow],
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(grad_y: &Tensor, tape: &PoolTape) -> Result<Tensor> {
    expect_shape(grad_y, &tape.out_shape, "maxpool2x2 backward")?;
    let mut grad_x = vec![0.0; tape.in_shape.iter().product()];
    for (g, &idx) in grad_y.data().iter().zip(&tape.argmax) {
        grad_x[idx] += g;
    }
    Tensor::from_vec(&tape.in_shape, grad_x)
}

/// Nearest-neighbor ×2 upsampling: every input pixel becomes a 2×2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = expect_rank4(x, "upsample_nearest2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; n * c * oh * ow];
    for i in 0..n {
        for ch in 0..c {
            let in_base = (i * c + ch) * h * w;
            let out_base = (i * c + ch) * oh * ow;
            for r in 0..oh {
                let src_row = in_base + (r / 2) * w;
                let dst_row = out_base + r * ow;
                for cc in 0..ow {
                    y[dst_row + cc] = x.data()[src_row + cc / 2];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], y)
}

/// Adjoint of [`upsample_nearest2x`]: sum each 2×2 block of the output
/// gradient into its source pixel.
pub fn upsample_nearest2x_backward(grad_y: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = expect_rank4(grad_y, "upsample_nearest2x backward")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "upsample backward needs even extents, got {oh}×{ow}"
        )));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut grad_x = vec![0.0; n * c * h * w];
    for i in 0..n {
        for ch in 0..c {
            let out_base = (i * c + ch) * oh * ow;
            let in_base = (i * c + ch) * h * w;
            for r in 0..oh {
                for cc in 0..ow {
                    grad_x[in_base + (r / 2) * w + cc / 2] += grad_y.data()[out_base + r * ow + cc];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], grad_x)
}

/// Concatenate two `[N, C, H, W]` tensors along the channel axis. The
/// adjoint is [`split_channels`].
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = expect_rank4(a, "concat_channels")?;
    let (nb, cb, hb, wb) = expect_rank4(b, "concat_channels")?;
    if n != nb || h != hb || w != wb {
        return Err(Error::InvalidArgument(format!(
            "concat_channels: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * plane..][..ca * plane]);
        out.extend_from_slice(&b.data()[i * cb * plane..][..cb * plane]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out)
}

/// Split a `[N, C, H, W]` tensor into the first `c_first` channels and the
/// remainder. Inverse (and gradient router) of [`concat_channels`].
pub fn split_channels(x: &Tensor, c_first: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = expect_rank4(x, "split_channels")?;
    if c_first == 0 || c_first >= c {
        return Err(Error::InvalidArgument(format!(
            "split_channels: cannot take {c_first} of {c} channels"
        )));
    }
    let plane = h * w;
    let (ca, cb) = (c_first, c - c_first);
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * cb * plane);
    for i in 0..n {
        let base = i * c * plane;
        a.extend_from_slice(&x.data()[base..][..ca * plane]);
        b.extend_from_slice(&x.data()[base + ca * plane..][..cb * plane]);
    }
    Ok((
        Tensor::from_vec(&[n, ca, h, w], a)?,
        Tensor::from_vec(&[n, cb, h, w], b)?,
    ))
}

// ---------------------------------------------------------------------------
// Soft-IoU loss
// ---------------------------------------------------------------------------

/// Smoothed soft-IoU loss for one sample:
/// `1 − (Σ p·g + s) / (Σ p + Σ g − Σ p·g + s)` with `s` = [`IOU_SMOOTH`].
/// Returns the loss and its exact gradient with respect to the predictions.
/// `pred` holds probabilities, `gt` a 0/1 mask of the same shape.
pub fn soft_iou_loss(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    expect_shape(gt, pred.shape(), "soft_iou_loss")?;
    let mut inter = 0.0;
    let mut p_sum = 0.0;
    let mut g_sum = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += p * g;
        p_sum += p;
        g_sum += g;
    }
    let a = inter + IOU_SMOOTH;
    let b = p_sum + g_sum - inter + IOU_SMOOTH;
    let loss = 1.0 - a / b;
    // d loss / d p_j = −(g_j·b − a·(1 − g_j)) / b²
    let inv_b2 = 1.0 / (b * b);
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(_, &g)| -(g * b - a * (1.0 - g)) * inv_b2)
        .collect();
    Ok((loss, Tensor::from_vec(pred.shape(), grad)?))
}

/// Mean soft-IoU loss over a batch of `[N, 1, H, W]` predictions against
/// `[N, 1, H, W]` masks, with the matching gradient.
pub fn soft_iou_loss_batch(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = expect_rank4(pred, "soft_iou_loss_batch")?;
    if c != 1 {
        return Err(Error::InvalidArgument(format!(
            "soft_iou_loss_batch expects single-channel predictions, got {c}"
        )));
    }
    expect_shape(gt, pred.shape(), "soft_iou_loss_batch")?;
    let plane = h * w;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let p = Tensor::from_vec(&[h, w], pred.data()[i * plane..][..plane].to_vec())?;
        let g = Tensor::from_vec(&[h, w], gt.data()[i * plane..][..plane].to_vec())?;
        let (loss, g_pred) = soft_iou_loss(&p, &g)?;
        total += loss * inv_n;
        for (dst, src) in grad[i * plane..][..plane].iter_mut().zip(g_pred.data()) {
            *dst = src * inv_n;
        }
    }
    Ok((total, Tensor::from_vec(pred.shape(), grad)?))
}
