//! Finite-difference gradient auditing.
//!
//! Every hand-written backward pass in this crate is checked against central
//! differences: perturb one scalar, rerun the forward pass, and compare the
//! slope against the analytic gradient. The helpers here are deliberately
//! oblivious to layers and tensors — they see a closure from a flat slice to
//! a scalar — so the same audit drives unit tests, the acceptance suite, and
//! the `dhif gradcheck` subcommand.

/// Perturbation used by central differences. With f64 and well-scaled
/// activations this puts the truncation error (O(step²)) and the rounding
/// error (O(ε/step)) both far below the tolerance.
pub const FD_STEP: f64 = 1e-5;

/// Acceptance threshold on [`relative_error`].
pub const FD_TOL: f64 = 1e-6;

/// Central-difference slope of `f` along coordinate `i`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], i: usize, step: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + step;
    let fp = f(&probe);
    probe[i] = x[i] - step;
    let fm = f(&probe);
    (fp - fm) / (2.0 * step)
}

/// Audit one coordinate, refining the step when it disagrees.
///
/// Networks with relu (or max-pooling) are piecewise smooth: when a
/// pre-activation happens to lie within ±step of a kink, the central
/// difference straddles two linear pieces and reports a bogus slope even
/// though the analytic gradient is correct. Shrinking the step shrinks the
/// vulnerable interval proportionally, so a coordinate that misses the
/// tolerance is re-measured at step/10 and step/100 and the best agreement
/// wins. A genuinely wrong gradient disagrees at every step and still
/// fails.
fn audit_coordinate<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    i: usize,
    analytic: f64,
    step: f64,
) -> (f64, f64) {
    let mut numeric = central_diff(f, x, i, step);
    let mut err = relative_error(analytic, numeric);
    let mut refined_step = step;
    for _ in 0..2 {
        if err <= FD_TOL {
            break;
        }
        refined_step /= 10.0;
        let candidate = central_diff(f, x, i, refined_step);
        let candidate_err = relative_error(analytic, candidate);
        if candidate_err < err {
            err = candidate_err;
            numeric = candidate;
        }
    }
    (err, numeric)
}

/// |a − b| / max(|a|, |b|, 1). The unit floor makes near-zero pairs compare
/// absolutely instead of amplifying finite-difference noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Result of auditing one gradient vector.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Audit `analytic` as the gradient of `f` at `x` by central differences on
/// every coordinate. `f` is re-evaluated 2·len times; keep the instance
/// small.
pub fn check_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut report = GradCheck {
        checked: x.len(),
        max_relative_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in 0..x.len() {
        let (err, numeric) = audit_coordinate(&mut f, x, i, analytic[i], step);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}

/// Audit a strided sample of coordinates instead of all of them. Used where
/// the full sweep would be slow; `stride` is clamped to at least 1.
pub fn check_gradient_sampled<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    stride: usize,
) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let stride = stride.max(1);
    let mut report = GradCheck {
        checked: 0,
        max_relative_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut i = 0;
    while i < x.len() {
        let (err, numeric) = audit_coordinate(&mut f, x, i, analytic[i], step);
        report.checked += 1;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
        i += stride;
    }
    report
}

pub mod suite {
    //! Named gradient-audit groups for the `gradcheck` subcommand.
    //!
    //! Each group builds a small randomized instance of one layer (or the
    //! whole mini network), runs its analytic backward pass, and compares a
    //! sample of coordinates against central differences. Large parameter
    //! tensors are subsampled with a stride so the default run stays fast;
    //! the worst relative error over all members of a group is reported.

    use std::collections::BTreeMap;

    use super::{check_gradient_sampled, FD_STEP, FD_TOL};
    use crate::blocks::{BlockKind, BlockOrder, ResBlock};
    use crate::dhif::DhifLayer;
    use crate::error::Result;
    use crate::net::{MiniDetector, NetConfig};
    use crate::ops::{
        collapse_normalize, collapse_normalize_backward, soft_iou_loss_batch, Activation,
        BatchNorm2d, Conv2d,
    };
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;

    /// Worst finite-difference disagreement over one audit group.
    #[derive(Debug, Clone)]
    pub struct GroupReport {
        pub group: String,
        /// Coordinates compared against central differences.
        pub checked: usize,
        pub max_relative_error: f64,
    }

    impl GroupReport {
        pub fn passes(&self) -> bool {
            self.max_relative_error <= FD_TOL
        }
    }

    /// Coordinates to probe per tensor; tensors larger than this are
    /// strided down to roughly this many checks.
    const BUDGET: usize = 48;

    fn stride_for(len: usize) -> usize {
        len.div_ceil(BUDGET).max(1)
    }

    struct Group {
        report: GroupReport,
        /// When set, the sign of the largest-magnitude analytic gradient
        /// entry of the group's first member is flipped before comparison —
        /// a deliberate single-sign fault used to test failure reporting.
        sabotage: bool,
    }

    impl Group {
        fn new(name: impl Into<String>, sabotage: bool) -> Group {
            Group {
                report: GroupReport {
                    group: name.into(),
                    checked: 0,
                    max_relative_error: 0.0,
                },
                sabotage,
            }
        }

        /// Compare `analytic` against central differences of `f` at `x`.
        fn member<F: FnMut(&[f64]) -> f64>(&mut self, f: F, x: &[f64], analytic: &[f64]) {
            let stride = stride_for(x.len());
            let mut analytic = analytic.to_vec();
            if std::mem::take(&mut self.sabotage) {
                // Flip the largest-magnitude entry among the coordinates the
                // strided audit will actually probe.
                let worst = (0..analytic.len())
                    .step_by(stride)
                    .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
                    .unwrap_or(0);
                analytic[worst] = -analytic[worst];
            }
            let r = check_gradient_sampled(f, x, &analytic, FD_STEP, stride);
            self.report.checked += r.checked;
            if r.max_relative_error > self.report.max_relative_error {
                self.report.max_relative_error = r.max_relative_error;
            }
        }

        fn finish(self) -> GroupReport {
            self.report
        }
    }

    fn weighted(y: &Tensor, probe: &[f64]) -> f64 {
        y.data().iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    /// Run every audit group at the given kernel sizes (the plain and
    /// dynamic convolutions are kernel-parametric; the scalar ops run
    /// once). `inject_fault` flips one backward sign inside the first
    /// convolution group so the failure path itself can be exercised.
    pub fn run(kernel_sizes: &[usize], inject_fault: bool) -> Result<Vec<GroupReport>> {
        run_salted(kernel_sizes, inject_fault, 0)
    }

    /// Like [`run`] but with every group's RNG seed offset by `salt`, so
    /// repeated calls audit independent random instances of each layer.
    pub fn run_salted(
        kernel_sizes: &[usize],
        inject_fault: bool,
        salt: u64,
    ) -> Result<Vec<GroupReport>> {
        let salt = salt.wrapping_mul(10_000);
        let mut out = Vec::new();
        let mut fault_left = inject_fault;
        for &k in kernel_sizes {
            out.push(conv_group(k, std::mem::take(&mut fault_left), salt)?);
        }
        out.push(batchnorm_group(salt)?);
        out.push(collapse_group(salt)?);
        out.push(loss_group(salt)?);
        for &k in kernel_sizes {
            out.push(dhif_group(k, salt)?);
        }
        out.push(block_group("res-block standard", BlockKind::Standard, 2, 3, 300 + salt)?);
        for &k in kernel_sizes {
            out.push(block_group(
                &format!("res-block dynamic-first k={k}"),
                BlockKind::Dynamic {
                    order: BlockOrder::DhifFirst,
                    k,
                    nonlinearity: Activation::Tanh,
                },
                2,
                3,
                301 + k as u64 + salt,
            )?);
            out.push(block_group(
                &format!("res-block dynamic-second k={k}"),
                BlockKind::Dynamic {
                    order: BlockOrder::DhifSecond,
                    k,
                    nonlinearity: Activation::Tanh,
                },
                2,
                2,
                311 + k as u64 + salt,
            )?);
        }
        out.push(net_group(salt)?);
        Ok(out)
    }

    fn conv_group(k: usize, sabotage: bool, salt: u64) -> Result<GroupReport> {
        let mut group = Group::new(format!("conv k={k}"), sabotage);
        let mut rng = SeededRng::new(40 + k as u64 + salt);
        let mut conv = Conv2d::new(2, 3, k, 1, k / 2, true)?;
        conv.init_kaiming(&mut rng);
        let x = Tensor::from_vec(&[2, 2, 5, 4], rng.fill_normal(80))?;
        let (y, tape) = conv.forward(&x)?;
        let probe = rng.fill_normal(y.len());
        let grad_y = Tensor::from_vec(y.shape(), probe.clone())?;
        let (grad_x, grads) = conv.backward(&grad_y, tape)?;

        let c = conv.clone();
        let p = probe.clone();
        group.member(
            |v| {
                let mut c = c.clone();
                c.weight = Tensor::from_vec(c.weight.shape(), v.to_vec()).unwrap();
                weighted(&c.forward(&x).unwrap().0, &p)
            },
            conv.weight.data(),
            grads.weight.data(),
        );
        let c = conv.clone();
        let p = probe.clone();
        group.member(
            |v| {
                let mut c = c.clone();
                c.bias = Some(Tensor::from_vec(&[3], v.to_vec()).unwrap());
                weighted(&c.forward(&x).unwrap().0, &p)
            },
            conv.bias.as_ref().unwrap().data(),
            grads.bias.as_ref().unwrap().data(),
        );
        let c = conv.clone();
        group.member(
            |v| {
                let xt = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
                weighted(&c.forward(&xt).unwrap().0, &probe)
            },
            x.data(),
            grad_x.data(),
        );
        Ok(group.finish())
    }

    fn batchnorm_group(salt: u64) -> Result<GroupReport> {
        let mut group = Group::new("batchnorm", false);
        let mut rng = SeededRng::new(50 + salt);
        let mut bn = BatchNorm2d::new(2)?;
        bn.gamma = Tensor::from_vec(&[2], vec![1.3, 0.7])?;
        bn.beta = Tensor::from_vec(&[2], vec![0.2, -0.4])?;
        let x = Tensor::from_vec(&[2, 2, 3, 3], rng.fill_normal(36))?;
        let probe = rng.fill_normal(36);
        for training in [true, false] {
            let mut fwd = bn.clone();
            let (y, tape) = fwd.forward(&x, training)?;
            let grad_y = Tensor::from_vec(y.shape(), probe.clone())?;
            let (grad_x, grads) = fwd.backward(&grad_y, tape)?;

            let b = bn.clone();
            let p = probe.clone();
            group.member(
                |v| {
                    let xt = Tensor::from_vec(&[2, 2, 3, 3], v.to_vec()).unwrap();
                    weighted(&b.clone().forward(&xt, training).unwrap().0, &p)
                },
                x.data(),
                grad_x.data(),
            );
            let b = bn.clone();
            let xr = x.clone();
            let p = probe.clone();
            group.member(
                |v| {
                    let mut b = b.clone();
                    b.gamma = Tensor::from_vec(&[2], v.to_vec()).unwrap();
                    weighted(&b.forward(&xr, training).unwrap().0, &p)
                },
                bn.gamma.data(),
                grads.gamma.data(),
            );
            let b = bn.clone();
            let xr = x.clone();
            let p = probe.clone();
            group.member(
                |v| {
                    let mut b = b.clone();
                    b.beta = Tensor::from_vec(&[2], v.to_vec()).unwrap();
                    weighted(&b.forward(&xr, training).unwrap().0, &p)
                },
                bn.beta.data(),
                grads.beta.data(),
            );
        }
        Ok(group.finish())
    }

    fn collapse_group(salt: u64) -> Result<GroupReport> {
        let mut group = Group::new("collapse-normalize", false);
        let mut rng = SeededRng::new(60 + salt);
        let x = Tensor::from_vec(&[3, 4, 5], rng.fill_normal(60))?;
        let (f, tape) = collapse_normalize(&x)?;
        let probe = rng.fill_normal(f.len());
        let grad_f = Tensor::from_vec(f.shape(), probe.clone())?;
        let grad_x = collapse_normalize_backward(&grad_f, &tape)?;
        group.member(
            |v| {
                let xt = Tensor::from_vec(&[3, 4, 5], v.to_vec()).unwrap();
                weighted(&collapse_normalize(&xt).unwrap().0, &probe)
            },
            x.data(),
            grad_x.data(),
        );
        Ok(group.finish())
    }

    fn loss_group(salt: u64) -> Result<GroupReport> {
        let mut group = Group::new("soft-iou loss", false);
        let mut rng = SeededRng::new(70 + salt);
        // Keep probabilities comfortably inside (0, 1) so the probe steps
        // stay in-domain.
        let pred_vals: Vec<f64> = rng
            .fill_normal(32)
            .iter()
            .map(|v| 0.5 + 0.4 * v.tanh())
            .collect();
        let gt_vals: Vec<f64> = (0..32).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let pred = Tensor::from_vec(&[2, 1, 4, 4], pred_vals)?;
        let gt = Tensor::from_vec(&[2, 1, 4, 4], gt_vals)?;
        let (_, grad_pred) = soft_iou_loss_batch(&pred, &gt)?;
        group.member(
            |v| {
                let p = Tensor::from_vec(&[2, 1, 4, 4], v.to_vec()).unwrap();
                soft_iou_loss_batch(&p, &gt).unwrap().0
            },
            pred.data(),
            grad_pred.data(),
        );
        Ok(group.finish())
    }

    fn dhif_group(k: usize, salt: u64) -> Result<GroupReport> {
        let mut group = Group::new(format!("dhif k={k}"), false);
        let mut rng = SeededRng::new(80 + k as u64 + salt);
        let mut layer = DhifLayer::new(2, 2, k, 1, k / 2, Activation::Tanh)?;
        layer.init_kaiming(&mut rng);
        // Kaiming leaves the filter generator at zero; give it signal so
        // every backward path is exercised.
        let p_vals = rng.fill_normal(layer.projection.len());
        for (dst, v) in layer.projection.data_mut().iter_mut().zip(p_vals) {
            *dst = 0.5 * v;
        }
        let b_vals = rng.fill_normal(layer.proj_bias.len());
        for (dst, v) in layer.proj_bias.data_mut().iter_mut().zip(b_vals) {
            *dst = 0.3 * v;
        }
        let x = Tensor::from_vec(&[2, 2, 4, 4], rng.fill_normal(64))?;
        let (y, tape) = layer.forward(&x)?;
        let probe = rng.fill_normal(y.len());
        let grad_y = Tensor::from_vec(y.shape(), probe.clone())?;
        let (grad_x, grads) = layer.backward(&grad_y, tape)?;

        let l = layer.clone();
        let p = probe.clone();
        group.member(
            |v| {
                let xt = Tensor::from_vec(&[2, 2, 4, 4], v.to_vec()).unwrap();
                weighted(&l.forward(&xt).unwrap().0, &p)
            },
            x.data(),
            grad_x.data(),
        );
        let members = [
            (&layer.projection, &grads.projection),
            (&layer.proj_bias, &grads.proj_bias),
            (&layer.out_weight, &grads.out_weight),
        ];
        for (idx, (param, grad)) in members.into_iter().enumerate() {
            let l = layer.clone();
            let xr = x.clone();
            let p = probe.clone();
            let shape = param.shape().to_vec();
            group.member(
                |v| {
                    let mut l = l.clone();
                    let slot = match idx {
                        0 => &mut l.projection,
                        1 => &mut l.proj_bias,
                        _ => &mut l.out_weight,
                    };
                    *slot = Tensor::from_vec(&shape, v.to_vec()).unwrap();
                    weighted(&l.forward(&xr).unwrap().0, &p)
                },
                param.data(),
                grad.data(),
            );
        }
        Ok(group.finish())
    }

    fn block_group(
        name: &str,
        kind: BlockKind,
        in_ch: usize,
        out_ch: usize,
        seed: u64,
    ) -> Result<GroupReport> {
        let mut group = Group::new(name, false);
        let mut rng = SeededRng::new(seed);
        let mut block = ResBlock::new(in_ch, out_ch, kind)?;
        block.init_kaiming(&mut rng);
        let x = Tensor::from_vec(&[2, in_ch, 4, 4], rng.fill_normal(2 * in_ch * 16))?;
        let (y, tape) = block.forward(&x, true)?;
        let probe = rng.fill_normal(y.len());
        let grad_y = Tensor::from_vec(y.shape(), probe.clone())?;
        let mut grads = BTreeMap::new();
        let grad_x = block.backward(&grad_y, tape, "blk", &mut grads)?;

        let b = block.clone();
        let p = probe.clone();
        group.member(
            |v| {
                let xt = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
                weighted(&b.clone().forward(&xt, true).unwrap().0, &p)
            },
            x.data(),
            grad_x.data(),
        );
        let mut names = Vec::new();
        block.for_each_param("blk", &mut |name, _| names.push(name));
        for name in names {
            let mut current = None;
            block.for_each_param("blk", &mut |n, t| {
                if n == name {
                    current = Some(t.clone());
                }
            });
            let current = current.unwrap();
            let b = block.clone();
            let xr = x.clone();
            let p = probe.clone();
            let n_ref = name.clone();
            group.member(
                |v| {
                    let mut b = b.clone();
                    b.for_each_param_mut("blk", &mut |n, t| {
                        if n == n_ref {
                            *t = Tensor::from_vec(t.shape(), v.to_vec()).unwrap();
                        }
                    });
                    weighted(&b.forward(&xr, true).unwrap().0, &p)
                },
                current.data(),
                grads[&name].data(),
            );
        }
        Ok(group.finish())
    }

    fn net_group(salt: u64) -> Result<GroupReport> {
        let mut group = Group::new("mini-net end-to-end", false);
        let config = NetConfig {
            in_ch: 1,
            channels: vec![2, 3],
            kernel_size: 3,
            dhif_levels: [1].into_iter().collect(),
            nonlinearity: Activation::Tanh,
            block_order: BlockOrder::DhifFirst,
        };
        let mut net = MiniDetector::new(config)?;
        let mut rng = SeededRng::new(90 + salt);
        net.init_kaiming(&mut rng);
        let x = Tensor::from_vec(&[1, 1, 8, 8], rng.fill_uniform(64))?;
        let gt_vals: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
        let gt = Tensor::from_vec(&[1, 1, 8, 8], gt_vals)?;
        let (pred, tape) = net.forward(&x, true)?;
        let (_, grad_pred) = soft_iou_loss_batch(&pred, &gt)?;
        let grads = net.backward(&grad_pred, tape)?;

        let mut names = Vec::new();
        net.for_each_param(&mut |n, _| names.push(n));
        for name in names {
            let mut current = None;
            net.for_each_param(&mut |n, t| {
                if n == name {
                    current = Some(t.clone());
                }
            });
            let current = current.unwrap();
            let m = net.clone();
            let xr = x.clone();
            let gr = gt.clone();
            let n_ref = name.clone();
            group.member(
                |v| {
                    let mut m = m.clone();
                    m.for_each_param_mut(&mut |n, t| {
                        if n == n_ref {
                            *t = Tensor::from_vec(t.shape(), v.to_vec()).unwrap();
                        }
                    });
                    let (pred, _) = m.forward(&xr, true).unwrap();
                    soft_iou_loss_batch(&pred, &gr).unwrap().0
                },
                current.data(),
                grads[&name].data(),
            );
        }
        Ok(group.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = Σ i · x_i² has gradient 2·i·x_i.
        let x: Vec<f64> = vec![0.3, -1.2, 2.0, 0.0];
        let f = |v: &[f64]| -> f64 { v.iter().enumerate().map(|(i, x)| i as f64 * x * x).sum() };
        let analytic: Vec<f64> = x.iter().enumerate().map(|(i, x)| 2.0 * i as f64 * x).collect();
        let report = check_gradient(f, &x, &analytic, FD_STEP);
        assert!(report.passes(FD_TOL), "max err {}", report.max_relative_error);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = vec![0.5, -0.25];
        let f = |v: &[f64]| -> f64 { v[0] * v[0] + v[1] };
        let wrong = vec![2.0 * x[0] + 0.01, 1.0];
        let report = check_gradient(f, &x, &wrong, FD_STEP);
        assert!(!report.passes(FD_TOL));
        assert_eq!(report.worst_index, 0);
    }

    #[test]
    fn kink_adjacent_instance_passes_with_step_refinement() {
        // Instance salt 4 places one relu pre-activation of the dynamic-first
        // block within ~1e-5 of zero, so the primary-step central difference
        // straddles the kink and disagrees wildly; the refined steps agree
        // with the analytic gradient to ~1e-9. This pins the refinement
        // behaviour of `audit_coordinate`.
        for r in suite::run_salted(&[3], false, 4).unwrap() {
            assert!(r.passes(), "{}: max rel err {:.3e}", r.group, r.max_relative_error);
        }
    }

    #[test]
    fn suite_groups_all_pass_at_default_kernel() {
        let reports = suite::run(&[3], false).unwrap();
        assert!(reports.len() >= 8, "expected one report per group");
        for r in &reports {
            assert!(r.checked > 0);
            assert!(r.passes(), "{}: max rel err {}", r.group, r.max_relative_error);
        }
    }

    #[test]
    fn suite_detects_an_injected_sign_fault() {
        // k=3 exercises the strided-sampling path: the flipped coordinate
        // must be one the audit actually probes.
        let reports = suite::run(&[3], true).unwrap();
        assert!(
            !reports[0].passes(),
            "sign flip in {} went unnoticed (err {})",
            reports[0].group,
            reports[0].max_relative_error
        );
        // Only the sabotaged group is affected.
        assert!(reports[1..].iter().all(|r| r.passes()));
    }

    #[test]
    fn relative_error_floors_at_unit_scale() {
        // Tiny absolute disagreement near zero must not explode.
        assert!(relative_error(1e-9, 2e-9) < 1e-6);
        // Large values compare relatively.
        assert!(relative_error(1000.0, 1001.0) > 1e-4);
        assert_eq!(relative_error(5.0, 5.0), 0.0);
    }
}
