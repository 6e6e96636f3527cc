//! A compact encoder–decoder detector for single-frame small-target
//! segmentation.
//!
//! The network is a small U-Net: a stack of residual encoder blocks with
//! 2×2 max-pooling between levels, mirrored by decoder blocks that upsample
//! and concatenate the matching encoder features, finished by a 1×1
//! convolution and a sigmoid that yields a per-pixel target probability.
//!
//! Any subset of encoder levels can swap a standard convolution for a
//! [`DhifLayer`] (see [`NetConfig::dhif_levels`]); everything else about the
//! architecture is unchanged, which keeps baseline-versus-dynamic
//! comparisons honest: with a freshly initialized (zeroed) filter generator
//! the dynamic network computes *exactly* the same function as the baseline.

use std::collections::{BTreeMap, BTreeSet};

use crate::blocks::{BlockKind, BlockOrder, ResBlock, ResBlockTape};
use crate::dhif::{DhifLayer, FilterBank};
use crate::error::{Error, Result};
use crate::ops::{
    collapse_normalize, concat_channels, maxpool2x2, maxpool2x2_backward, split_channels,
    upsample_nearest2x, upsample_nearest2x_backward, ActTape, Activation, Conv2d, Conv2dTape,
    PoolTape,
};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Architecture description for [`MiniDetector`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Input channels (1 for single-band infrared).
    pub in_ch: usize,
    /// Encoder widths, finest level first. Length = number of levels ≥ 2.
    pub channels: Vec<usize>,
    /// Kernel size of the dynamic layers (standard convolutions stay 3×3).
    pub kernel_size: usize,
    /// 1-based encoder levels whose block carries a dynamic convolution.
    /// Empty set = all-standard baseline.
    pub dhif_levels: BTreeSet<usize>,
    /// Bounded nonlinearity applied to generated filter coefficients.
    pub nonlinearity: Activation,
    /// Position of the dynamic convolution inside its block.
    pub block_order: BlockOrder,
}

impl Default for NetConfig {
    /// Desk-scale default: three levels [8, 16, 32] with dynamic blocks at
    /// levels 2 and 3. Level 1 stays standard — a dynamic layer directly on
    /// the raw input underperforms, so it is not the default input layer.
    fn default() -> NetConfig {
        NetConfig {
            in_ch: 1,
            channels: vec![8, 16, 32],
            kernel_size: 3,
            dhif_levels: [2, 3].into_iter().collect(),
            nonlinearity: Activation::Tanh,
            block_order: BlockOrder::DhifFirst,
        }
    }
}

impl NetConfig {
    /// All-standard variant of this configuration (same widths, no dynamic
    /// layers).
    pub fn baseline(&self) -> NetConfig {
        NetConfig {
            dhif_levels: BTreeSet::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 {
            return Err(Error::Config("in_ch must be positive".into()));
        }
        if self.channels.len() < 2 {
            return Err(Error::Config(format!(
                "need at least two encoder levels, got {:?}",
                self.channels
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "channel widths must be positive, got {:?}",
                self.channels
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        let depth = self.channels.len();
        for &lvl in &self.dhif_levels {
            if lvl == 0 || lvl > depth {
                return Err(Error::Config(format!(
                    "dhif level {lvl} out of range 1..={depth}"
                )));
            }
        }
        Ok(())
    }

    fn kind_for_level(&self, level: usize) -> BlockKind {
        if self.dhif_levels.contains(&level) {
            BlockKind::Dynamic {
                order: self.block_order,
                k: self.kernel_size,
                nonlinearity: self.nonlinearity,
            }
        } else {
            BlockKind::Standard
        }
    }
}

/// Encoder–decoder segmentation network; see the module docs.
#[derive(Debug, Clone)]
pub struct MiniDetector {
    config: NetConfig,
    encoders: Vec<ResBlock>,
    /// `decoders[lvl]` consumes the upsampled level-`lvl+1` features
    /// concatenated with the level-`lvl` skip and outputs `channels[lvl]`.
    decoders: Vec<ResBlock>,
    head: Conv2d,
}

pub struct NetTape {
    enc: Vec<ResBlockTape>,
    pools: Vec<PoolTape>,
    /// Deepest level first, matching the decode order.
    dec: Vec<ResBlockTape>,
    head: Conv2dTape,
    sigmoid: ActTape,
}

impl MiniDetector {
    pub fn new(config: NetConfig) -> Result<MiniDetector> {
        config.validate()?;
        let depth = config.channels.len();
        let mut encoders = Vec::with_capacity(depth);
        for lvl in 0..depth {
            let in_ch = if lvl == 0 {
                config.in_ch
            } else {
                config.channels[lvl - 1]
            };
            encoders.push(ResBlock::new(
                in_ch,
                config.channels[lvl],
                config.kind_for_level(lvl + 1),
            )?);
        }
        let mut decoders = Vec::with_capacity(depth - 1);
        for lvl in 0..depth - 1 {
            decoders.push(ResBlock::new(
                config.channels[lvl + 1] + config.channels[lvl],
                config.channels[lvl],
                BlockKind::Standard,
            )?);
        }
        let head = Conv2d::new(config.channels[0], 1, 1, 1, 0, true)?;
        Ok(MiniDetector {
            config,
            encoders,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.channels.len()
    }

    pub fn init_kaiming(&mut self, rng: &mut SeededRng) {
        for enc in &mut self.encoders {
            enc.init_kaiming(rng);
        }
        for dec in &mut self.decoders {
            dec.init_kaiming(rng);
        }
        self.head.init_kaiming(rng);
    }

    pub fn param_count(&self) -> usize {
        self.encoders.iter().map(ResBlock::param_count).sum::<usize>()
            + self.decoders.iter().map(ResBlock::param_count).sum::<usize>()
            + self.head.param_count()
    }

    /// Parameters added by the dynamic layers over the all-standard
    /// baseline with the same widths.
    pub fn extra_param_count(&self) -> usize {
        self.encoders.iter().map(ResBlock::extra_param_count).sum()
    }

    /// The dynamic layers together with their parameter-name prefixes,
    /// shallowest first.
    pub fn dynamic_layers(&self) -> Vec<(String, &DhifLayer)> {
        let mut out = Vec::new();
        for (i, enc) in self.encoders.iter().enumerate() {
            if let Some(layer) = enc.dynamic_layer() {
                let slot = match self.config.block_order {
                    BlockOrder::DhifFirst => "conv1",
                    BlockOrder::DhifSecond => "conv2",
                };
                out.push((format!("enc{}.{slot}", i + 1), layer));
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = match *x.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "detector expects a [N, C, H, W] input, got {:?}",
                    x.shape()
                )))
            }
        };
        if c != self.config.in_ch {
            return Err(Error::InvalidArgument(format!(
                "detector expects {} input channels, got {c}",
                self.config.in_ch
            )));
        }
        let pools = self.depth() - 1;
        let factor = 1usize << pools;
        if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "input extent {h}×{w} must be a positive multiple of {factor} \
                 for {} pooling stages",
                pools
            )));
        }
        Ok((n, c, h, w))
    }

    /// Full forward pass. `training` selects batch-norm mode (and updates
    /// running statistics when set). Returns per-pixel probabilities in
    /// `[N, 1, H, W]` plus the tape for [`MiniDetector::backward`].
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<(Tensor, NetTape)> {
        self.check_input(x)?;
        let depth = self.depth();
        let mut enc_tapes = Vec::with_capacity(depth);
        let mut pool_tapes = Vec::with_capacity(depth - 1);
        let mut skips: Vec<Tensor> = Vec::with_capacity(depth - 1);
        let mut feat = x.clone();
        for lvl in 0..depth {
            let (e, tape) = self.encoders[lvl].forward(&feat, training)?;
            enc_tapes.push(tape);
            if lvl < depth - 1 {
                let (p, pool_tape) = maxpool2x2(&e)?;
                pool_tapes.push(pool_tape);
                skips.push(e);
                feat = p;
            } else {
                feat = e;
            }
        }
        let mut dec_tapes = Vec::with_capacity(depth - 1);
        for lvl in (0..depth - 1).rev() {
            let up = upsample_nearest2x(&feat)?;
            let cat = concat_channels(&up, &skips[lvl])?;
            let (d, tape) = self.decoders[lvl].forward(&cat, training)?;
            dec_tapes.push(tape);
            feat = d;
        }
        let (logits, head_tape) = self.head.forward(&feat)?;
        let (pred, sigmoid_tape) = Activation::Sigmoid.forward(&logits);
        Ok((
            pred,
            NetTape {
                enc: enc_tapes,
                pools: pool_tapes,
                dec: dec_tapes,
                head: head_tape,
                sigmoid: sigmoid_tape,
            },
        ))
    }

    /// Evaluation-mode forward without gradient bookkeeping.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let (pred, _) = self.forward(x, false)?;
        Ok(pred)
    }

    /// Backward pass from `grad_pred` (∂loss/∂probabilities). Returns the
    /// gradient for every trainable parameter, keyed by the same names the
    /// parameter visitors produce.
    pub fn backward(&self, grad_pred: &Tensor, tape: NetTape) -> Result<BTreeMap<String, Tensor>> {
        let depth = self.depth();
        if tape.enc.len() != depth || tape.dec.len() != depth - 1 {
            return Err(Error::ContractViolation(
                "network tape does not match the architecture".into(),
            ));
        }
        let mut grads = BTreeMap::new();
        let g_logits = Activation::Sigmoid.backward(grad_pred, &tape.sigmoid)?;
        let (mut g_feat, head_grads) = self.head.backward(&g_logits, tape.head)?;
        grads.insert("head.weight".to_string(), head_grads.weight);
        if let Some(b) = head_grads.bias {
            grads.insert("head.bias".to_string(), b);
        }

        // Decoders were taped deepest level first; reverse order of the
        // forward decode is shallowest first.
        let mut dec_tapes = tape.dec;
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; depth - 1];
        for lvl in 0..depth - 1 {
            let block_tape = dec_tapes.pop().ok_or_else(|| {
                Error::ContractViolation("decoder tape consumed twice".into())
            })?;
            let g_cat = self.decoders[lvl].backward(
                &g_feat,
                block_tape,
                &format!("dec{}", lvl + 1),
                &mut grads,
            )?;
            let (g_up, g_skip) = split_channels(&g_cat, self.config.channels[lvl + 1])?;
            skip_grads[lvl] = Some(g_skip);
            g_feat = upsample_nearest2x_backward(&g_up)?;
        }

        // g_feat now sits at the deepest encoder output.
        let mut enc_tapes = tape.enc;
        let mut pool_tapes = tape.pools;
        for lvl in (0..depth).rev() {
            let block_tape = enc_tapes.pop().ok_or_else(|| {
                Error::ContractViolation("encoder tape consumed twice".into())
            })?;
            let g_in = self.encoders[lvl].backward(
                &g_feat,
                block_tape,
                &format!("enc{}", lvl + 1),
                &mut grads,
            )?;
            if lvl == 0 {
                break;
            }
            let pool_tape = pool_tapes.pop().ok_or_else(|| {
                Error::ContractViolation("pool tape consumed twice".into())
            })?;
            let g_pooled = maxpool2x2_backward(&g_in, &pool_tape)?;
            let g_skip = skip_grads[lvl - 1].take().ok_or_else(|| {
                Error::ContractViolation("missing skip gradient".into())
            })?;
            g_feat = g_pooled.add(&g_skip)?;
        }
        Ok(grads)
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, enc) in self.encoders.iter().enumerate() {
            enc.for_each_param(&format!("enc{}", i + 1), f);
        }
        for (i, dec) in self.decoders.iter().enumerate() {
            dec.for_each_param(&format!("dec{}", i + 1), f);
        }
        f("head.weight".to_string(), &self.head.weight);
        if let Some(b) = &self.head.bias {
            f("head.bias".to_string(), b);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            enc.for_each_param_mut(&format!("enc{}", i + 1), f);
        }
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            dec.for_each_param_mut(&format!("dec{}", i + 1), f);
        }
        f("head.weight".to_string(), &mut self.head.weight);
        if let Some(b) = &mut self.head.bias {
            f("head.bias".to_string(), b);
        }
    }

    /// Batch-norm running statistics (checkpoint state that is not
    /// trained).
    pub fn for_each_buffer(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, enc) in self.encoders.iter().enumerate() {
            enc.for_each_buffer(&format!("enc{}", i + 1), f);
        }
        for (i, dec) in self.decoders.iter().enumerate() {
            dec.for_each_buffer(&format!("dec{}", i + 1), f);
        }
    }

    pub fn for_each_buffer_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            enc.for_each_buffer_mut(&format!("enc{}", i + 1), f);
        }
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            dec.for_each_buffer_mut(&format!("dec{}", i + 1), f);
        }
    }

    /// Generate the per-location filter banks every dynamic layer produces
    /// for the first sample of `x`, by running the encoder path in
    /// evaluation mode and collapsing the features each dynamic layer sees.
    /// Returns `(prefix, bank)` pairs, shallowest layer first.
    pub fn filter_banks(&mut self, x: &Tensor) -> Result<Vec<(String, FilterBank)>> {
        let (_, _, h, w) = self.check_input(x)?;
        let sample = Tensor::from_vec(
            &[1, self.config.in_ch, h, w],
            x.data()[..self.config.in_ch * h * w].to_vec(),
        )?;
        let mut banks = Vec::new();
        let mut feat = sample;
        let depth = self.depth();
        for lvl in 0..depth {
            if self.encoders[lvl].has_dynamic_slot() {
                let layer_input = match self.config.block_order {
                    BlockOrder::DhifFirst => feat.clone(),
                    BlockOrder::DhifSecond => self.encoders[lvl].first_stage_features(&feat)?,
                };
                let shape = layer_input.shape().to_vec();
                let plane = Tensor::from_vec(&shape[1..], layer_input.data().to_vec())?;
                let (f_norm, _) = collapse_normalize(&plane)?;
                let layer = self.encoders[lvl]
                    .dynamic_layer()
                    .expect("checked has_dynamic_slot above");
                let bank = layer.generate_filter_bank(&f_norm)?;
                banks.push((format!("enc{}", lvl + 1), bank));
            }
            let (e, _) = self.encoders[lvl].forward(&feat, false)?;
            feat = if lvl < depth - 1 {
                let (p, _) = maxpool2x2(&e)?;
                p
            } else {
                e
            };
        }
        Ok(banks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, FD_STEP, FD_TOL};
    use crate::ops::soft_iou_loss_batch;

    fn small_config() -> NetConfig {
        NetConfig {
            in_ch: 1,
            channels: vec![2, 3],
            kernel_size: 3,
            dhif_levels: [1].into_iter().collect(),
            nonlinearity: Activation::Tanh,
            block_order: BlockOrder::DhifFirst,
        }
    }

    #[test]
    fn forward_shapes_and_range() {
        let mut net = MiniDetector::new(NetConfig::default()).unwrap();
        let mut rng = SeededRng::new(7);
        net.init_kaiming(&mut rng);
        let x = Tensor::from_vec(&[2, 1, 16, 16], rng.fill_uniform(512)).unwrap();
        let (pred, _) = net.forward(&x, true).unwrap();
        assert_eq!(pred.shape(), &[2, 1, 16, 16]);
        assert!(pred.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_extent_and_channels() {
        let mut net = MiniDetector::new(NetConfig::default()).unwrap();
        // 3 levels → extents must be multiples of 4.
        assert!(net.forward(&Tensor::zeros(&[1, 1, 10, 12]), false).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 2, 16, 16]), false).is_err());
        let bad = NetConfig {
            dhif_levels: [5].into_iter().collect(),
            ..NetConfig::default()
        };
        assert!(MiniDetector::new(bad).is_err());
    }

    #[test]
    fn parameter_accounting_against_baseline() {
        let one_level = NetConfig {
            dhif_levels: [2].into_iter().collect(),
            ..NetConfig::default()
        };
        let dynamic = MiniDetector::new(one_level.clone()).unwrap();
        let baseline = MiniDetector::new(one_level.baseline()).unwrap();
        // One dynamic level at k = 3 adds k⁶ + k⁴ = 810 parameters.
        assert_eq!(dynamic.param_count() - baseline.param_count(), 810);
        assert_eq!(dynamic.extra_param_count(), 810);
        assert_eq!(baseline.extra_param_count(), 0);

        // The default puts dynamic blocks at levels 2 and 3.
        let net2 = MiniDetector::new(NetConfig::default()).unwrap();
        assert_eq!(net2.extra_param_count(), 2 * 810);
    }

    #[test]
    fn dynamic_layer_placement_follows_config() {
        let net = MiniDetector::new(NetConfig::default()).unwrap();
        let layers = net.dynamic_layers();
        let names: Vec<&str> = layers.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["enc2.conv1", "enc3.conv1"]);

        let second = NetConfig {
            dhif_levels: [2].into_iter().collect(),
            block_order: BlockOrder::DhifSecond,
            ..NetConfig::default()
        };
        let net = MiniDetector::new(second).unwrap();
        let layers = net.dynamic_layers();
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0].0, "enc2.conv2");
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let mut a = MiniDetector::new(NetConfig::default()).unwrap();
        let mut b = MiniDetector::new(NetConfig::default()).unwrap();
        a.init_kaiming(&mut SeededRng::new(42));
        b.init_kaiming(&mut SeededRng::new(42));
        let mut pa = Vec::new();
        a.for_each_param(&mut |n, t| pa.push((n, t.data().to_vec())));
        let mut pb = Vec::new();
        b.for_each_param(&mut |n, t| pb.push((n, t.data().to_vec())));
        assert_eq!(pa, pb);

        let x = Tensor::from_vec(&[1, 1, 8, 8], SeededRng::new(9).fill_uniform(64)).unwrap();
        let (ya, _) = a.forward(&x, false).unwrap();
        let (yb, _) = b.forward(&x, false).unwrap();
        assert_eq!(ya.data(), yb.data());
    }

    /// With a zeroed filter generator (the initial state) the dynamic
    /// network computes exactly the baseline function: both draw identical
    /// Kaiming weights from the same stream, and the generated coefficients
    /// are all θ(0) = 0, so each dynamic layer reduces to its plain
    /// convolution.
    #[test]
    fn fresh_dynamic_net_matches_baseline_exactly() {
        let config = NetConfig::default();
        let mut dynamic = MiniDetector::new(config.clone()).unwrap();
        let mut baseline = MiniDetector::new(config.baseline()).unwrap();
        dynamic.init_kaiming(&mut SeededRng::new(11));
        baseline.init_kaiming(&mut SeededRng::new(11));
        let x = Tensor::from_vec(&[2, 1, 16, 16], SeededRng::new(12).fill_uniform(512)).unwrap();
        let (yd, _) = dynamic.forward(&x, true).unwrap();
        let (yb, _) = baseline.forward(&x, true).unwrap();
        let max_diff = yd
            .data()
            .iter()
            .zip(yb.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "max deviation {max_diff}");
    }

    /// End-to-end gradient audit: every parameter of a two-level network
    /// (dynamic first level) against central differences through the full
    /// forward + soft-IoU loss.
    #[test]
    fn full_network_gradients_match_finite_differences() {
        let mut net = MiniDetector::new(small_config()).unwrap();
        let mut rng = SeededRng::new(31);
        net.init_kaiming(&mut rng);
        let x = Tensor::from_vec(&[1, 1, 8, 8], rng.fill_uniform(64)).unwrap();
        let gt_vals: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
        let gt = Tensor::from_vec(&[1, 1, 8, 8], gt_vals).unwrap();

        let (pred, tape) = net.forward(&x, true).unwrap();
        let (_, grad_pred) = soft_iou_loss_batch(&pred, &gt).unwrap();
        let grads = net.backward(&grad_pred, tape).unwrap();

        let mut names = Vec::new();
        net.for_each_param(&mut |n, _| names.push(n));
        assert_eq!(names.len(), grads.len());
        for name in names {
            let mut current = None;
            net.for_each_param(&mut |n, t| {
                if n == name {
                    current = Some(t.clone());
                }
            });
            let current = current.unwrap();
            let net_ref = net.clone();
            let x_ref = x.clone();
            let gt_ref = gt.clone();
            let name_ref = name.clone();
            let obj = |v: &[f64]| {
                let mut m = net_ref.clone();
                m.for_each_param_mut(&mut |n, t| {
                    if n == name_ref {
                        *t = Tensor::from_vec(t.shape(), v.to_vec()).unwrap();
                    }
                });
                let (pred, _) = m.forward(&x_ref, true).unwrap();
                soft_iou_loss_batch(&pred, &gt_ref).unwrap().0
            };
            let report = check_gradient(obj, current.data(), grads[&name].data(), FD_STEP);
            assert!(
                report.passes(FD_TOL),
                "{name}: rel err {} at index {:?}",
                report.max_relative_error,
                report.worst_index
            );
        }
    }

    #[test]
    fn filter_banks_come_from_dynamic_levels() {
        let mut net = MiniDetector::new(NetConfig::default()).unwrap();
        net.init_kaiming(&mut SeededRng::new(5));
        let x = Tensor::from_vec(&[1, 1, 16, 16], SeededRng::new(6).fill_uniform(256)).unwrap();
        let banks = net.filter_banks(&x).unwrap();
        let names: Vec<&str> = banks.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["enc2", "enc3"]);
        // Stride-1 dynamic layers with padding k/2 produce one filter set
        // per pixel of their level: 8×8 at level 2, 4×4 at level 3.
        assert_eq!(banks[0].1.out_h * banks[0].1.out_w, 64);
        assert_eq!(banks[1].1.out_h * banks[1].1.out_w, 16);
    }
}
