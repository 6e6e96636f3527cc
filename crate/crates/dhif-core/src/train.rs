//! Deterministic training and evaluation harness.
//!
//! One [`TrainConfig`] fully determines a run: the network is initialized
//! from a seed-derived stream, the shuffle order from a second independent
//! stream, batches are assembled in shuffle order, and every reduction is
//! ordered — so a fixed seed reproduces the final parameters and metrics
//! bit-for-bit on one platform. Wall-clock time is reported separately and
//! never enters the serialized report.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use crate::blocks::BlockOrder;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, DEFAULT_THRESHOLD, MATCH_DISTANCE};
use crate::net::{MiniDetector, NetConfig};
use crate::ops::{soft_iou_loss_batch, Activation};
use crate::optim::Adam;
use crate::rng::{derive_seed, SeededRng};
use crate::synth::Dataset;
use crate::tensor::Tensor;

/// Default initial learning rate.
pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;
/// Default multiplicative decay factor.
pub const DEFAULT_LR_DECAY: f64 = 0.5;
/// Default decay interval in epochs.
pub const DEFAULT_LR_DECAY_EVERY: usize = 50;

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by this factor every
    /// `lr_decay_every` epochs (step schedule).
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Probability threshold binarizing predictions for metrics.
    pub threshold: f64,
    /// Centroid matching distance for detection metrics, in pixels.
    pub match_distance: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            net: NetConfig::default(),
            epochs: 100,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            lr_decay: DEFAULT_LR_DECAY,
            lr_decay_every: DEFAULT_LR_DECAY_EVERY,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            match_distance: MATCH_DISTANCE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must sit in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.match_distance < 0.0 {
            return Err(Error::Config(format!(
                "match_distance must be non-negative, got {}",
                self.match_distance
            )));
        }
        Ok(())
    }

    /// Step schedule: `lr(epoch) = lr₀ · decay^⌊epoch / every⌋` with
    /// 0-based epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate
            * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean soft-IoU loss over the training set.
    pub loss: f64,
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Test-set metrics of the final model (for zero epochs: of the
    /// freshly initialized model).
    pub metrics: MetricsReport,
    pub param_count: usize,
    pub extra_param_count: usize,
    /// Wall-clock seconds; excluded from [`TrainReport::to_csv`].
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// Serialize as CSV: one row per epoch with the training loss, then a
    /// `final` summary row carrying the test metrics. Deliberately free of
    /// wall-clock columns so two runs with one seed serialize
    /// byte-identically.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,iou,niou,pd,fa\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},,,,", e.epoch, e.loss);
        }
        let m = &self.metrics;
        let _ = writeln!(
            out,
            "final,{},{},{},{},{}",
            self.final_loss().map(|l| l.to_string()).unwrap_or_default(),
            m.iou,
            m.niou,
            m.pd,
            m.fa
        );
        out
    }
}

/// Train a fresh network per `config` on `train_set`, then evaluate on
/// `test_set`. Returns the trained network plus its report.
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<(MiniDetector, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training and test sets must be non-empty".into(),
        ));
    }
    let start = Instant::now();
    let mut net = MiniDetector::new(config.net.clone())?;
    net.init_kaiming(&mut SeededRng::new(derive_seed(config.seed, 0)));
    let mut shuffle_rng = SeededRng::new(derive_seed(config.seed, 1));
    let mut optimizer = Adam::new(config.learning_rate);
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        optimizer.lr = config.lr_at(epoch);
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, gt) = assemble_batch(train_set, batch)?;
            let (pred, tape) = net.forward(&x, true)?;
            let (loss, grad_pred) = soft_iou_loss_batch(&pred, &gt)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("loss became {loss} on a batch of {}", batch.len()),
                });
            }
            let grads = net.backward(&grad_pred, tape)?;
            optimizer.begin_step();
            let mut failure = None;
            net.for_each_param_mut(&mut |name, param| {
                if failure.is_some() {
                    return;
                }
                let result = match grads.get(&name) {
                    Some(g) => optimizer.apply(&name, param, g),
                    None => Err(Error::ContractViolation(format!(
                        "no gradient produced for parameter {name}"
                    ))),
                };
                if let Err(e) = result {
                    failure = Some(e);
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            loss_sum += loss * batch.len() as f64;
        }
        records.push(EpochRecord {
            epoch,
            lr: optimizer.lr,
            loss: loss_sum / n as f64,
        });
    }

    let metrics = evaluate_net(&mut net, test_set, config.threshold, config.match_distance)?;
    let report = TrainReport {
        epochs: records,
        metrics,
        param_count: net.param_count(),
        extra_param_count: net.extra_param_count(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((net, report))
}

/// Evaluation-mode metrics of `net` on a dataset.
pub fn evaluate_net(
    net: &mut MiniDetector,
    dataset: &Dataset,
    threshold: f64,
    match_distance: f64,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let (h, w) = (dataset.height, dataset.width);
    let mut preds = Vec::with_capacity(dataset.len());
    // Batched for speed; evaluation-mode batch norm uses running statistics
    // so the grouping cannot affect results.
    for batch_start in (0..dataset.len()).step_by(16) {
        let idx: Vec<usize> = (batch_start..(batch_start + 16).min(dataset.len())).collect();
        let (x, _) = assemble_batch(dataset, &idx)?;
        let pred = net.predict(&x)?;
        for (j, _) in idx.iter().enumerate() {
            let plane = pred.data()[j * h * w..(j + 1) * h * w].to_vec();
            preds.push(metrics::threshold(
                &Tensor::from_vec(&[h, w], plane)?,
                threshold,
            ));
        }
    }
    metrics::evaluate(&preds, &dataset.masks, match_distance)
}

/// Stack the selected scenes into `[B, 1, H, W]` images and `[B, 1, H, W]`
/// masks.
fn assemble_batch(dataset: &Dataset, indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let (h, w) = (dataset.height, dataset.width);
    let plane = h * w;
    let mut x = Vec::with_capacity(indices.len() * plane);
    let mut gt = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        if i >= dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "scene index {i} out of range for a dataset of {}",
                dataset.len()
            )));
        }
        x.extend_from_slice(dataset.images[i].data());
        gt.extend_from_slice(dataset.masks[i].data());
    }
    Ok((
        Tensor::from_vec(&[indices.len(), 1, h, w], x)?,
        Tensor::from_vec(&[indices.len(), 1, h, w], gt)?,
    ))
}

/// One configuration axis combination of the ablation study.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub levels: BTreeSet<usize>,
    pub kernel_size: usize,
    pub nonlinearity: Activation,
    pub order: BlockOrder,
    pub final_loss: f64,
    pub metrics: MetricsReport,
    pub param_count: usize,
    pub extra_param_count: usize,
    /// Training throughput, images per second (wall-clock derived).
    pub images_per_sec: f64,
}

/// Axes swept by [`ablation_suite`]. The suite runs the full cartesian
/// product in declaration order.
#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub levels: Vec<BTreeSet<usize>>,
    pub kernel_sizes: Vec<usize>,
    pub nonlinearities: Vec<Activation>,
    pub orders: Vec<BlockOrder>,
}

impl AblationGrid {
    /// The published study: replacement level, kernel size, generator
    /// nonlinearity, and block order around the defaults.
    pub fn standard() -> AblationGrid {
        AblationGrid {
            levels: vec![
                BTreeSet::new(),
                [1].into_iter().collect(),
                [2].into_iter().collect(),
                [3].into_iter().collect(),
            ],
            kernel_sizes: vec![3],
            nonlinearities: vec![Activation::Tanh],
            orders: vec![BlockOrder::DhifFirst],
        }
    }

    pub fn combinations(&self) -> usize {
        self.levels.len() * self.kernel_sizes.len() * self.nonlinearities.len() * self.orders.len()
    }
}

/// Train one run per grid combination (same seed and data for all) and
/// collect the per-variant outcomes.
pub fn ablation_suite(
    base: &TrainConfig,
    grid: &AblationGrid,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<AblationRow>> {
    if grid.combinations() == 0 {
        return Err(Error::InvalidArgument(
            "ablation grid has an empty axis".into(),
        ));
    }
    let mut rows = Vec::with_capacity(grid.combinations());
    for levels in &grid.levels {
        for &k in &grid.kernel_sizes {
            for &nonlinearity in &grid.nonlinearities {
                for &order in &grid.orders {
                    let config = TrainConfig {
                        net: NetConfig {
                            dhif_levels: levels.clone(),
                            kernel_size: k,
                            nonlinearity,
                            block_order: order,
                            ..base.net.clone()
                        },
                        ..base.clone()
                    };
                    let (_, report) = train(train_set, test_set, &config)?;
                    let trained_images = (train_set.len() * config.epochs) as f64;
                    rows.push(AblationRow {
                        levels: levels.clone(),
                        kernel_size: k,
                        nonlinearity,
                        order,
                        final_loss: report.final_loss().unwrap_or(f64::NAN),
                        metrics: report.metrics,
                        param_count: report.param_count,
                        extra_param_count: report.extra_param_count,
                        images_per_sec: if report.wall_seconds > 0.0 {
                            trained_images / report.wall_seconds
                        } else {
                            0.0
                        },
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// CSV for the ablation table (one row per configuration).
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "levels,kernel,nonlinearity,order,final_loss,iou,niou,pd,fa,params,extra_params,images_per_sec\n",
    );
    for row in rows {
        let levels = if row.levels.is_empty() {
            "none".to_string()
        } else {
            row.levels
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("+")
        };
        let _ = writeln!(
            out,
            "{levels},{},{},{},{},{},{},{},{},{},{},{:.2}",
            row.kernel_size,
            row.nonlinearity.name(),
            row.order.name(),
            row.final_loss,
            row.metrics.iou,
            row.metrics.niou,
            row.metrics.pd,
            row.metrics.fa,
            row.param_count,
            row.extra_param_count,
            row.images_per_sec
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SceneSpec};

    fn tiny_dataset(n: usize, master: u64) -> Dataset {
        let spec = SceneSpec {
            height: 32,
            width: 32,
            n_blobs: 1,
            n_clouds: 1,
            ..SceneSpec::default()
        };
        generate_dataset(n, &spec, master).unwrap()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                channels: vec![4, 8],
                dhif_levels: [2].into_iter().collect(),
                ..NetConfig::default()
            },
            epochs,
            batch_size: 4,
            seed: 77,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_is_a_step_function() {
        let config = TrainConfig {
            learning_rate: 8e-4,
            lr_decay: 0.5,
            lr_decay_every: 50,
            ..TrainConfig::default()
        };
        assert_eq!(config.lr_at(0), 8e-4);
        assert_eq!(config.lr_at(49), 8e-4);
        assert_eq!(config.lr_at(50), 4e-4);
        assert_eq!(config.lr_at(99), 4e-4);
        assert_eq!(config.lr_at(100), 2e-4);
    }

    #[test]
    fn zero_epochs_reports_only_the_initial_evaluation() {
        let data = tiny_dataset(4, 1);
        let (net, report) = train(&data, &data, &tiny_config(0)).unwrap();
        assert!(report.epochs.is_empty());
        assert!(report.final_loss().is_none());
        assert_eq!(report.param_count, net.param_count());
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 2, "header + final row only:\n{csv}");
        assert!(csv.starts_with("epoch,loss,iou,niou,pd,fa\nfinal,"));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let train_data = tiny_dataset(8, 2);
        let test_data = tiny_dataset(4, 3);
        let config = tiny_config(3);
        let (_, r1) = train(&train_data, &test_data, &config).unwrap();
        let (_, r2) = train(&train_data, &test_data, &config).unwrap();
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(r1.epochs.len(), 3);
        // Three epochs on eight scenes: the loss must at least move and
        // stay finite; a strict decrease is asserted between the first and
        // last epoch (soft-IoU starts near 1 on an untrained net and the
        // schedule keeps steps small).
        assert!(r1.epochs.iter().all(|e| e.loss.is_finite()));
        assert!(r1.epochs[2].loss < r1.epochs[0].loss);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = tiny_dataset(2, 5);
        let empty = Dataset {
            height: 32,
            width: 32,
            images: vec![],
            masks: vec![],
            seeds: vec![],
            targets: vec![],
        };
        assert!(train(&empty, &data, &tiny_config(1)).is_err());
        assert!(train(&data, &empty, &tiny_config(1)).is_err());
    }

    #[test]
    fn train_then_eval_agree_for_zero_epochs() {
        let data = tiny_dataset(4, 8);
        let config = tiny_config(0);
        let (mut net, report) = train(&data, &data, &config).unwrap();
        let again = evaluate_net(&mut net, &data, config.threshold, config.match_distance).unwrap();
        assert_eq!(report.metrics.iou, again.iou);
        assert_eq!(report.metrics.niou, again.niou);
        assert_eq!(report.metrics.pd, again.pd);
        assert_eq!(report.metrics.fa, again.fa);
    }

    #[test]
    fn ablation_suite_size_is_the_grid_product() {
        let train_data = tiny_dataset(4, 11);
        let test_data = tiny_dataset(2, 12);
        let grid = AblationGrid {
            levels: vec![BTreeSet::new(), [2].into_iter().collect()],
            kernel_sizes: vec![3],
            nonlinearities: vec![Activation::Tanh, Activation::Sigmoid],
            orders: vec![BlockOrder::DhifFirst],
        };
        let base = tiny_config(1);
        let rows = ablation_suite(&base, &grid, &train_data, &test_data).unwrap();
        assert_eq!(rows.len(), grid.combinations());
        assert_eq!(rows.len(), 4);
        // Parameter accounting is consistent in every row.
        for row in &rows {
            let expected_extra: usize = row.levels.len()
                * crate::dhif::extra_param_count(row.kernel_size);
            assert_eq!(row.extra_param_count, expected_extra);
        }
        let csv = ablation_csv(&rows);
        assert!(csv.starts_with("levels,kernel,"));
        assert_eq!(csv.lines().count(), 5);
    }

    /// Manual timing probe for budgeting the acceptance-suite runs; run
    /// with `--ignored --nocapture`. Scale knobs come from the
    /// environment: `PROBE_CHANNELS` (comma list), `PROBE_EPOCHS`,
    /// `PROBE_BATCH`, `PROBE_LR`, `PROBE_SEED`, `PROBE_LEVELS`
    /// (comma list, empty string = baseline).
    #[test]
    #[ignore]
    fn epoch_timing_probe() {
        let env_usize = |k: &str, d: usize| {
            std::env::var(k)
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(d)
        };
        let channels: Vec<usize> = std::env::var("PROBE_CHANNELS")
            .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
            .unwrap_or_else(|_| vec![8, 16, 32]);
        let levels: BTreeSet<usize> = match std::env::var("PROBE_LEVELS") {
            Ok(v) if v.is_empty() => BTreeSet::new(),
            Ok(v) => v.split(',').map(|s| s.parse().unwrap()).collect(),
            Err(_) => [2, 3].into_iter().collect(),
        };
        let lr = std::env::var("PROBE_LR")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(DEFAULT_LEARNING_RATE);
        let spec = SceneSpec::default();
        let train_data = generate_dataset(200, &spec, 1000).unwrap();
        let test_data = generate_dataset(100, &spec, 2000).unwrap();
        let config = TrainConfig {
            net: NetConfig {
                channels,
                dhif_levels: levels,
                ..NetConfig::default()
            },
            epochs: env_usize("PROBE_EPOCHS", 2),
            batch_size: env_usize("PROBE_BATCH", 16),
            learning_rate: lr,
            seed: env_usize("PROBE_SEED", 0) as u64,
            ..TrainConfig::default()
        };
        let start = std::time::Instant::now();
        let (mut net, report) = train(&train_data, &test_data, &config).unwrap();
        let on_train =
            evaluate_net(&mut net, &train_data, config.threshold, config.match_distance).unwrap();
        let losses: Vec<String> = report
            .epochs
            .iter()
            .filter(|e| e.epoch % 10 == 0 || e.epoch + 1 == config.epochs)
            .map(|e| format!("{}:{:.4}", e.epoch, e.loss))
            .collect();
        println!(
            "{:?} levels {:?} batch {} lr {}: {} epochs + eval in {:.1}s | loss {} | iou {:.4} niou {:.4} pd {:.3} fa {:.6} | train-set iou {:.4} pd {:.3} fa {:.6}",
            config.net.channels,
            config.net.dhif_levels,
            config.batch_size,
            config.learning_rate,
            config.epochs,
            start.elapsed().as_secs_f64(),
            losses.join(" "),
            report.metrics.iou,
            report.metrics.niou,
            report.metrics.pd,
            report.metrics.fa,
            on_train.iou,
            on_train.pd,
            on_train.fa
        );
    }

    /// Manual multi-seed probe over net variants; run with
    /// `--ignored --nocapture`. `PROBE_SEEDS` is a comma list of seeds,
    /// `PROBE_MATRIX` a comma list of variants from
    /// {baseline, dhif23, dhif1, sigmoid23}. Shares the scale knobs
    /// of [`epoch_timing_probe`].
    #[test]
    #[ignore]
    fn trend_probe() {
        let env_usize = |k: &str, d: usize| {
            std::env::var(k)
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(d)
        };
        let channels: Vec<usize> = std::env::var("PROBE_CHANNELS")
            .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
            .unwrap_or_else(|_| vec![2, 4, 8]);
        let seeds: Vec<u64> = std::env::var("PROBE_SEEDS")
            .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
            .unwrap_or_else(|_| vec![0, 1, 2, 3, 4]);
        let matrix: Vec<String> = std::env::var("PROBE_MATRIX")
            .map(|v| v.split(',').map(str::to_owned).collect())
            .unwrap_or_else(|_| vec!["baseline".into(), "dhif23".into()]);
        let lr = std::env::var("PROBE_LR")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(2e-3);
        let spec = SceneSpec::default();
        let train_data = generate_dataset(200, &spec, 1000).unwrap();
        let test_data = generate_dataset(100, &spec, 2000).unwrap();
        for variant in &matrix {
            let (levels, nonlinearity): (BTreeSet<usize>, Activation) = match variant.as_str() {
                "baseline" => (BTreeSet::new(), Activation::Tanh),
                "dhif23" => ([2, 3].into_iter().collect(), Activation::Tanh),
                "dhif1" => ([1].into_iter().collect(), Activation::Tanh),
                "sigmoid23" => ([2, 3].into_iter().collect(), Activation::Sigmoid),
                other => panic!("unknown probe variant {other}"),
            };
            for &seed in &seeds {
                let config = TrainConfig {
                    net: NetConfig {
                        channels: channels.clone(),
                        dhif_levels: levels.clone(),
                        nonlinearity,
                        ..NetConfig::default()
                    },
                    epochs: env_usize("PROBE_EPOCHS", 100),
                    batch_size: env_usize("PROBE_BATCH", 8),
                    learning_rate: lr,
                    seed,
                    ..TrainConfig::default()
                };
                let start = std::time::Instant::now();
                let (_, report) = train(&train_data, &test_data, &config).unwrap();
                println!(
                    "{variant:<10} seed {seed}: iou {:.4} niou {:.4} pd {:.3} fa {:.6} loss {:.4} ({:.0}s)",
                    report.metrics.iou,
                    report.metrics.niou,
                    report.metrics.pd,
                    report.metrics.fa,
                    report.epochs.last().unwrap().loss,
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
}

#[cfg(test)]
mod perf_probe {
    use super::*;
    use crate::dhif::DhifLayer;
    use crate::ops::Conv2d;
    use crate::rng::SeededRng;

    fn time_it(label: &str, mut f: impl FnMut()) {
        let start = std::time::Instant::now();
        let mut n = 0;
        while start.elapsed().as_secs_f64() < 0.5 {
            f();
            n += 1;
        }
        let per = start.elapsed().as_secs_f64() / n as f64;
        println!("{label}: {:.2} ms/iter ({n} iters)", per * 1e3);
    }

    /// Per-op cost breakdown at the default training shapes; run with
    /// `--ignored --nocapture`.
    #[test]
    #[ignore]
    fn op_timing_probe() {
        let mut rng = SeededRng::new(1);
        let b = 8;
        // Level-1 standard convs at 64×64.
        let x1 = Tensor::from_vec(&[b, 1, 64, 64], rng.fill_normal(b * 4096)).unwrap();
        let mut c1 = Conv2d::new(1, 4, 3, 1, 1, false).unwrap();
        c1.init_kaiming(&mut rng);
        let x1b = Tensor::from_vec(&[b, 4, 64, 64], rng.fill_normal(b * 4 * 4096)).unwrap();
        let mut c1b = Conv2d::new(4, 4, 3, 1, 1, false).unwrap();
        c1b.init_kaiming(&mut rng);
        // Level-2 dhif at 32×32.
        let x2 = Tensor::from_vec(&[b, 4, 32, 32], rng.fill_normal(b * 4 * 1024)).unwrap();
        let mut d2 = DhifLayer::new(4, 8, 3, 1, 1, Activation::Tanh).unwrap();
        d2.init_kaiming(&mut rng);
        let mut c2 = Conv2d::new(4, 8, 3, 1, 1, false).unwrap();
        c2.init_kaiming(&mut rng);
        // Level-3 dhif at 16×16.
        let x3 = Tensor::from_vec(&[b, 8, 16, 16], rng.fill_normal(b * 8 * 256)).unwrap();
        let mut d3 = DhifLayer::new(8, 16, 3, 1, 1, Activation::Tanh).unwrap();
        d3.init_kaiming(&mut rng);
        // Decoder conv1 at 64×64 (concat channels).
        let xd = Tensor::from_vec(&[b, 12, 64, 64], rng.fill_normal(b * 12 * 4096)).unwrap();
        let mut cd = Conv2d::new(12, 4, 3, 1, 1, false).unwrap();
        cd.init_kaiming(&mut rng);

        time_it("conv 1->4 @64 fwd", || {
            let _ = c1.forward(&x1).unwrap();
        });
        time_it("conv 1->4 @64 fwd+bwd", || {
            let (y, t) = c1.forward(&x1).unwrap();
            let _ = c1.backward(&y, t).unwrap();
        });
        time_it("conv 4->4 @64 fwd+bwd", || {
            let (y, t) = c1b.forward(&x1b).unwrap();
            let _ = c1b.backward(&y, t).unwrap();
        });
        time_it("conv 4->8 @32 fwd+bwd", || {
            let (y, t) = c2.forward(&x2).unwrap();
            let _ = c2.backward(&y, t).unwrap();
        });
        time_it("dhif 4->8 @32 fwd", || {
            let _ = d2.forward(&x2).unwrap();
        });
        time_it("dhif 4->8 @32 fwd+bwd", || {
            let (y, t) = d2.forward(&x2).unwrap();
            let _ = d2.backward(&y, t).unwrap();
        });
        time_it("dhif 8->16 @16 fwd+bwd", || {
            let (y, t) = d3.forward(&x3).unwrap();
            let _ = d3.backward(&y, t).unwrap();
        });
        time_it("conv 12->4 @64 fwd+bwd", || {
            let (y, t) = cd.forward(&xd).unwrap();
            let _ = cd.backward(&y, t).unwrap();
        });
    }
}
