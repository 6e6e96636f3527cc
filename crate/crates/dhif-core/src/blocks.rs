//! Residual blocks with an optional dynamic convolution slot.
//!
//! A block computes
//!
//! ```text
//! y = relu( shortcut(x) + bn2( conv2( relu( bn1( conv1(x) ) ) ) ) )
//! ```
//!
//! where `shortcut` is the identity when the channel count is unchanged and
//! a 1×1 convolution + batch norm otherwise. In a *dynamic* block one of the
//! two convolutions is a [`DhifLayer`]; placing it first (on the raw block
//! input) is the default and the configuration that wins empirically — the
//! reversed order exists behind [`BlockOrder::DhifSecond`] purely for the
//! ablation study.
//!
//! The dynamic slot may use its own kernel size; the standard convolutions
//! in the block are always 3×3 with padding 1, so spatial extents never
//! change inside a block.

use std::collections::BTreeMap;

use crate::dhif::{DhifGrads, DhifLayer, DhifTape};
use crate::error::Result;
use crate::ops::{Activation, BatchNorm2d, BnTape, Conv2d, Conv2dGrads, Conv2dTape};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Which of the two convolutions of a dynamic block is the DHiF layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOrder {
    /// DHiF first, then a standard convolution (the default).
    DhifFirst,
    /// Standard convolution first, DHiF second (ablation only).
    DhifSecond,
}

impl BlockOrder {
    pub fn name(self) -> &'static str {
        match self {
            BlockOrder::DhifFirst => "dhif_first",
            BlockOrder::DhifSecond => "dhif_second",
        }
    }

    pub fn parse(s: &str) -> Result<BlockOrder> {
        match s {
            "dhif_first" => Ok(BlockOrder::DhifFirst),
            "dhif_second" => Ok(BlockOrder::DhifSecond),
            other => Err(crate::error::Error::Config(format!(
                "unknown block order {other:?} (expected dhif_first or dhif_second)"
            ))),
        }
    }
}

/// A convolution slot: standard or dynamic.
#[derive(Debug, Clone)]
pub enum ConvSlot {
    Standard(Conv2d),
    Dynamic(DhifLayer),
}

pub enum SlotTape {
    Standard(Conv2dTape),
    Dynamic(DhifTape),
}

#[derive(Debug, Clone)]
pub enum SlotGrads {
    Standard(Conv2dGrads),
    Dynamic(DhifGrads),
}

impl ConvSlot {
    fn standard(in_ch: usize, out_ch: usize) -> Result<ConvSlot> {
        Ok(ConvSlot::Standard(Conv2d::new(in_ch, out_ch, 3, 1, 1, false)?))
    }

    fn dynamic(in_ch: usize, out_ch: usize, k: usize, nonlinearity: Activation) -> Result<ConvSlot> {
        Ok(ConvSlot::Dynamic(DhifLayer::new(
            in_ch,
            out_ch,
            k,
            1,
            k / 2,
            nonlinearity,
        )?))
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, ConvSlot::Dynamic(_))
    }

    fn init_kaiming(&mut self, rng: &mut SeededRng) {
        match self {
            ConvSlot::Standard(c) => c.init_kaiming(rng),
            ConvSlot::Dynamic(d) => d.init_kaiming(rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, SlotTape)> {
        match self {
            ConvSlot::Standard(c) => {
                let (y, t) = c.forward(x)?;
                Ok((y, SlotTape::Standard(t)))
            }
            ConvSlot::Dynamic(d) => {
                let (y, t) = d.forward(x)?;
                Ok((y, SlotTape::Dynamic(t)))
            }
        }
    }

    fn backward(&self, grad_y: &Tensor, tape: SlotTape) -> Result<(Tensor, SlotGrads)> {
        match (self, tape) {
            (ConvSlot::Standard(c), SlotTape::Standard(t)) => {
                let (gx, g) = c.backward(grad_y, t)?;
                Ok((gx, SlotGrads::Standard(g)))
            }
            (ConvSlot::Dynamic(d), SlotTape::Dynamic(t)) => {
                let (gx, g) = d.backward(grad_y, t)?;
                Ok((gx, SlotGrads::Dynamic(g)))
            }
            _ => Err(crate::error::Error::ContractViolation(
                "conv slot backward received a tape of the other slot kind".into(),
            )),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            ConvSlot::Standard(c) => c.param_count(),
            ConvSlot::Dynamic(d) => d.param_count(),
        }
    }

    fn extra_param_count(&self) -> usize {
        match self {
            ConvSlot::Standard(_) => 0,
            ConvSlot::Dynamic(d) => d.extra_params(),
        }
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            ConvSlot::Standard(c) => {
                f(format!("{prefix}.weight"), &c.weight);
                if let Some(b) = &c.bias {
                    f(format!("{prefix}.bias"), b);
                }
            }
            ConvSlot::Dynamic(d) => {
                f(format!("{prefix}.weight"), &d.out_weight);
                f(format!("{prefix}.projection"), &d.projection);
                f(format!("{prefix}.proj_bias"), &d.proj_bias);
            }
        }
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            ConvSlot::Standard(c) => {
                f(format!("{prefix}.weight"), &mut c.weight);
                if let Some(b) = &mut c.bias {
                    f(format!("{prefix}.bias"), b);
                }
            }
            ConvSlot::Dynamic(d) => {
                f(format!("{prefix}.weight"), &mut d.out_weight);
                f(format!("{prefix}.projection"), &mut d.projection);
                f(format!("{prefix}.proj_bias"), &mut d.proj_bias);
            }
        }
    }

    fn grads_into(&self, grads: SlotGrads, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        match grads {
            SlotGrads::Standard(g) => {
                out.insert(format!("{prefix}.weight"), g.weight);
                if let Some(b) = g.bias {
                    out.insert(format!("{prefix}.bias"), b);
                }
            }
            SlotGrads::Dynamic(g) => {
                out.insert(format!("{prefix}.weight"), g.out_weight);
                out.insert(format!("{prefix}.projection"), g.projection);
                out.insert(format!("{prefix}.proj_bias"), g.proj_bias);
            }
        }
    }
}

/// How a block's convolutions are populated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two standard convolutions.
    Standard,
    /// One DHiF slot (position per [`BlockOrder`]) with the given kernel
    /// size and generator nonlinearity.
    Dynamic {
        order: BlockOrder,
        k: usize,
        nonlinearity: Activation,
    },
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kind: BlockKind,
    conv1: ConvSlot,
    bn1: BatchNorm2d,
    conv2: ConvSlot,
    bn2: BatchNorm2d,
    /// 1×1 projection + batch norm when the channel count changes.
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

pub struct ResBlockTape {
    conv1: SlotTape,
    bn1: BnTape,
    act1: crate::ops::ActTape,
    conv2: SlotTape,
    bn2: BnTape,
    shortcut: Option<(Conv2dTape, BnTape)>,
    act_out: crate::ops::ActTape,
}

impl ResBlock {
    pub fn new(in_ch: usize, out_ch: usize, kind: BlockKind) -> Result<ResBlock> {
        let (conv1, conv2) = match kind {
            BlockKind::Standard => (
                ConvSlot::standard(in_ch, out_ch)?,
                ConvSlot::standard(out_ch, out_ch)?,
            ),
            BlockKind::Dynamic {
                order: BlockOrder::DhifFirst,
                k,
                nonlinearity,
            } => (
                ConvSlot::dynamic(in_ch, out_ch, k, nonlinearity)?,
                ConvSlot::standard(out_ch, out_ch)?,
            ),
            BlockKind::Dynamic {
                order: BlockOrder::DhifSecond,
                k,
                nonlinearity,
            } => (
                ConvSlot::standard(in_ch, out_ch)?,
                ConvSlot::dynamic(out_ch, out_ch, k, nonlinearity)?,
            ),
        };
        let shortcut = if in_ch != out_ch {
            Some((
                Conv2d::new(in_ch, out_ch, 1, 1, 0, false)?,
                BatchNorm2d::new(out_ch)?,
            ))
        } else {
            None
        };
        Ok(ResBlock {
            in_ch,
            out_ch,
            kind,
            conv1,
            bn1: BatchNorm2d::new(out_ch)?,
            conv2,
            bn2: BatchNorm2d::new(out_ch)?,
            shortcut,
        })
    }

    pub fn init_kaiming(&mut self, rng: &mut SeededRng) {
        self.conv1.init_kaiming(rng);
        self.conv2.init_kaiming(rng);
        if let Some((c, _)) = &mut self.shortcut {
            c.init_kaiming(rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self
                .shortcut
                .as_ref()
                .map_or(0, |(c, b)| c.param_count() + b.param_count())
    }

    /// Parameters added by the dynamic slot relative to the all-standard
    /// block (zero for standard blocks).
    pub fn extra_param_count(&self) -> usize {
        self.conv1.extra_param_count() + self.conv2.extra_param_count()
    }

    pub fn has_dynamic_slot(&self) -> bool {
        self.conv1.is_dynamic() || self.conv2.is_dynamic()
    }

    /// Immutable access to the dynamic layer, if the block has one.
    pub fn dynamic_layer(&self) -> Option<&DhifLayer> {
        match (&self.conv1, &self.conv2) {
            (ConvSlot::Dynamic(d), _) => Some(d),
            (_, ConvSlot::Dynamic(d)) => Some(d),
            _ => None,
        }
    }

    /// Features entering the second convolution slot —
    /// `relu(bn1(conv1(x)))` — evaluated with running statistics and
    /// without touching block state. Used to reconstruct what a dynamic
    /// second slot actually sees.
    pub fn first_stage_features(&self, x: &Tensor) -> Result<Tensor> {
        let (t1, _) = self.conv1.forward(x)?;
        let mut bn = self.bn1.clone();
        let (b1, _) = bn.forward(&t1, false)?;
        let (a1, _) = Activation::Relu.forward(&b1);
        Ok(a1)
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<(Tensor, ResBlockTape)> {
        let (t1, conv1_tape) = self.conv1.forward(x)?;
        let (b1, bn1_tape) = self.bn1.forward(&t1, training)?;
        let (a1, act1_tape) = Activation::Relu.forward(&b1);
        let (t2, conv2_tape) = self.conv2.forward(&a1)?;
        let (b2, bn2_tape) = self.bn2.forward(&t2, training)?;
        let (residual, shortcut_tape) = match &mut self.shortcut {
            Some((conv, bn)) => {
                let (s, conv_tape) = conv.forward(x)?;
                let (s, bn_tape) = bn.forward(&s, training)?;
                (s, Some((conv_tape, bn_tape)))
            }
            None => (x.clone(), None),
        };
        let pre = b2.add(&residual)?;
        let (y, act_out_tape) = Activation::Relu.forward(&pre);
        Ok((
            y,
            ResBlockTape {
                conv1: conv1_tape,
                bn1: bn1_tape,
                act1: act1_tape,
                conv2: conv2_tape,
                bn2: bn2_tape,
                shortcut: shortcut_tape,
                act_out: act_out_tape,
            },
        ))
    }

    /// Backward through the whole block. Parameter gradients are inserted
    /// into `grads` under `prefix.{conv1,bn1,conv2,bn2,shortcut}...`.
    pub fn backward(
        &self,
        grad_y: &Tensor,
        tape: ResBlockTape,
        prefix: &str,
        grads: &mut BTreeMap<String, Tensor>,
    ) -> Result<Tensor> {
        let g_pre = Activation::Relu.backward(grad_y, &tape.act_out)?;
        // Main branch.
        let (g_t2, bn2_grads) = self.bn2.backward(&g_pre, tape.bn2)?;
        grads.insert(format!("{prefix}.bn2.gamma"), bn2_grads.gamma);
        grads.insert(format!("{prefix}.bn2.beta"), bn2_grads.beta);
        let (g_a1, conv2_grads) = self.conv2.backward(&g_t2, tape.conv2)?;
        self.conv2
            .grads_into(conv2_grads, &format!("{prefix}.conv2"), grads);
        let g_b1 = Activation::Relu.backward(&g_a1, &tape.act1)?;
        let (g_t1, bn1_grads) = self.bn1.backward(&g_b1, tape.bn1)?;
        grads.insert(format!("{prefix}.bn1.gamma"), bn1_grads.gamma);
        grads.insert(format!("{prefix}.bn1.beta"), bn1_grads.beta);
        let (g_x_main, conv1_grads) = self.conv1.backward(&g_t1, tape.conv1)?;
        self.conv1
            .grads_into(conv1_grads, &format!("{prefix}.conv1"), grads);
        // Shortcut branch: the residual add routes g_pre there unchanged.
        let g_x_short = match (&self.shortcut, tape.shortcut) {
            (Some((conv, bn)), Some((conv_tape, bn_tape))) => {
                let (g_s, bn_grads) = bn.backward(&g_pre, bn_tape)?;
                grads.insert(format!("{prefix}.shortcut.bn.gamma"), bn_grads.gamma);
                grads.insert(format!("{prefix}.shortcut.bn.beta"), bn_grads.beta);
                let (g_x, conv_grads) = conv.backward(&g_s, conv_tape)?;
                grads.insert(
                    format!("{prefix}.shortcut.conv.weight"),
                    conv_grads.weight,
                );
                g_x
            }
            (None, None) => g_pre,
            _ => {
                return Err(crate::error::Error::ContractViolation(
                    "res block tape does not match the block's shortcut structure".into(),
                ))
            }
        };
        g_x_main.add(&g_x_short)
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv1.for_each_param(&format!("{prefix}.conv1"), f);
        f(format!("{prefix}.bn1.gamma"), &self.bn1.gamma);
        f(format!("{prefix}.bn1.beta"), &self.bn1.beta);
        self.conv2.for_each_param(&format!("{prefix}.conv2"), f);
        f(format!("{prefix}.bn2.gamma"), &self.bn2.gamma);
        f(format!("{prefix}.bn2.beta"), &self.bn2.beta);
        if let Some((c, b)) = &self.shortcut {
            f(format!("{prefix}.shortcut.conv.weight"), &c.weight);
            f(format!("{prefix}.shortcut.bn.gamma"), &b.gamma);
            f(format!("{prefix}.shortcut.bn.beta"), &b.beta);
        }
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.for_each_param_mut(&format!("{prefix}.conv1"), f);
        f(format!("{prefix}.bn1.gamma"), &mut self.bn1.gamma);
        f(format!("{prefix}.bn1.beta"), &mut self.bn1.beta);
        self.conv2.for_each_param_mut(&format!("{prefix}.conv2"), f);
        f(format!("{prefix}.bn2.gamma"), &mut self.bn2.gamma);
        f(format!("{prefix}.bn2.beta"), &mut self.bn2.beta);
        if let Some((c, b)) = &mut self.shortcut {
            f(format!("{prefix}.shortcut.conv.weight"), &mut c.weight);
            f(format!("{prefix}.shortcut.bn.gamma"), &mut b.gamma);
            f(format!("{prefix}.shortcut.bn.beta"), &mut b.beta);
        }
    }

    /// Running batch-norm statistics (not trained parameters, but part of
    /// the model state a checkpoint must carry).
    pub fn for_each_buffer(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.bn1.running_mean"), &self.bn1.running_mean);
        f(format!("{prefix}.bn1.running_var"), &self.bn1.running_var);
        f(format!("{prefix}.bn2.running_mean"), &self.bn2.running_mean);
        f(format!("{prefix}.bn2.running_var"), &self.bn2.running_var);
        if let Some((_, b)) = &self.shortcut {
            f(format!("{prefix}.shortcut.bn.running_mean"), &b.running_mean);
            f(format!("{prefix}.shortcut.bn.running_var"), &b.running_var);
        }
    }

    pub fn for_each_buffer_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.bn1.running_mean"), &mut self.bn1.running_mean);
        f(format!("{prefix}.bn1.running_var"), &mut self.bn1.running_var);
        f(format!("{prefix}.bn2.running_mean"), &mut self.bn2.running_mean);
        f(format!("{prefix}.bn2.running_var"), &mut self.bn2.running_var);
        if let Some((_, b)) = &mut self.shortcut {
            f(format!("{prefix}.shortcut.bn.running_mean"), &mut b.running_mean);
            f(format!("{prefix}.shortcut.bn.running_var"), &mut b.running_var);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, FD_STEP, FD_TOL};

    fn fd_block(kind: BlockKind, in_ch: usize, out_ch: usize, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let mut block = ResBlock::new(in_ch, out_ch, kind).unwrap();
        block.init_kaiming(&mut rng);
        let x = Tensor::from_vec(&[2, in_ch, 4, 4], rng.fill_normal(2 * in_ch * 16)).unwrap();
        let (y, tape) = block.forward(&x, true).unwrap();
        let probe = rng.fill_normal(y.len());
        let grad_y = Tensor::from_vec(y.shape(), probe.clone()).unwrap();
        let mut grads = BTreeMap::new();
        let grad_x = block.backward(&grad_y, tape, "blk", &mut grads).unwrap();

        // Input gradient.
        let block_ref = block.clone();
        let obj = |v: &[f64]| {
            let xt = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            let mut b = block_ref.clone();
            let (y, _) = b.forward(&xt, true).unwrap();
            y.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let report = check_gradient(obj, x.data(), grad_x.data(), FD_STEP);
        assert!(
            report.passes(FD_TOL),
            "{kind:?} input grad err {}",
            report.max_relative_error
        );

        // Every parameter gradient, via the name-addressed param visitors.
        let mut names = Vec::new();
        block.for_each_param("blk", &mut |name, _| names.push(name));
        assert_eq!(names.len(), grads.len(), "one gradient per parameter");
        for name in names {
            let mut current = None;
            block.for_each_param("blk", &mut |n, t| {
                if n == name {
                    current = Some(t.clone());
                }
            });
            let current = current.unwrap();
            let block_ref = block.clone();
            let x_ref = x.clone();
            let name_ref = name.clone();
            let obj = |v: &[f64]| {
                let mut b = block_ref.clone();
                b.for_each_param_mut("blk", &mut |n, t| {
                    if n == name_ref {
                        *t = Tensor::from_vec(t.shape(), v.to_vec()).unwrap();
                    }
                });
                let (y, _) = b.forward(&x_ref, true).unwrap();
                y.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let report = check_gradient(obj, current.data(), grads[&name].data(), FD_STEP);
            assert!(
                report.passes(FD_TOL),
                "{kind:?} {name} grad err {}",
                report.max_relative_error
            );
        }
    }

    #[test]
    fn standard_block_gradients() {
        fd_block(BlockKind::Standard, 2, 3, 100);
    }

    #[test]
    fn dynamic_first_block_gradients() {
        fd_block(
            BlockKind::Dynamic {
                order: BlockOrder::DhifFirst,
                k: 3,
                nonlinearity: Activation::Tanh,
            },
            2,
            3,
            101,
        );
    }

    #[test]
    fn dynamic_second_block_gradients() {
        fd_block(
            BlockKind::Dynamic {
                order: BlockOrder::DhifSecond,
                k: 3,
                nonlinearity: Activation::Tanh,
            },
            2,
            2, // same channels: exercises the identity shortcut
            102,
        );
    }

    #[test]
    fn block_shapes_and_param_accounting() {
        let std_block = ResBlock::new(4, 8, BlockKind::Standard).unwrap();
        let dyn_block = ResBlock::new(
            4,
            8,
            BlockKind::Dynamic {
                order: BlockOrder::DhifFirst,
                k: 3,
                nonlinearity: Activation::Tanh,
            },
        )
        .unwrap();
        // Same kernel size ⇒ the dynamic block adds exactly the generator.
        assert_eq!(
            dyn_block.param_count() - std_block.param_count(),
            810
        );
        assert_eq!(std_block.extra_param_count(), 0);
        assert_eq!(dyn_block.extra_param_count(), 810);
        assert!(dyn_block.has_dynamic_slot());
        assert!(dyn_block.dynamic_layer().is_some());
        assert!(std_block.dynamic_layer().is_none());

        let mut b = std_block.clone();
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        let (y, _) = b.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 8]);
    }

    #[test]
    fn identity_shortcut_used_when_channels_match() {
        let mut rng = SeededRng::new(200);
        let mut block = ResBlock::new(3, 3, BlockKind::Standard).unwrap();
        block.init_kaiming(&mut rng);
        let mut names = Vec::new();
        block.for_each_param("b", &mut |n, _| names.push(n));
        assert!(names.iter().all(|n| !n.contains("shortcut")));
        // With all-zero conv weights the main branch contributes
        // β-shifted relu(bn(0)) = relu(0) = 0 pre-activation, so the block
        // reduces to relu(x).
        let mut zero_block = ResBlock::new(3, 3, BlockKind::Standard).unwrap();
        let x = Tensor::from_vec(&[1, 3, 2, 2], (0..12).map(|i| i as f64 - 6.0).collect()).unwrap();
        let (y, _) = zero_block.forward(&x, true).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }
}
