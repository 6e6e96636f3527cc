//! Command-line driver for the `dhif` binary.
//!
//! Subcommands cover the whole artifact lifecycle: `gen-data` materializes
//! a synthetic dataset, `train` fits a detector and archives its outputs,
//! `eval` re-scores a checkpoint against a dataset directory, `gradcheck`
//! audits every backward pass with finite differences, `freq-analyze`
//! summarizes a filter-bank dump in the frequency domain, and `bench`
//! times the dynamic convolution against its static counterpart.
//!
//! Exit codes are a stable contract for CI: 0 success, 1 check failure,
//! 2 configuration error, 3 I/O or parse error, 4 training divergence.
//! Output on stdout is deterministic given config and seed; wall-clock
//! readings (bench timings, progress notes) go to stderr or are explicitly
//! labeled as timings.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::dhif::DhifLayer;
use crate::error::{Error, Result};
use crate::freq;
use crate::gradcheck::suite;
use crate::metrics::MetricsReport;
use crate::net::MiniDetector;
use crate::ops::Conv2d;
use crate::rng::SeededRng;
use crate::synth::{generate_dataset, read_dataset, write_dataset, Dataset};
use crate::tensor::Tensor;
use crate::metrics::{DEFAULT_THRESHOLD, MATCH_DISTANCE};
use crate::train::{evaluate_net, train};

/// Offset added to `data.master_seed` for the test split, so one seed in
/// the config yields disjoint train/test scene streams.
pub const TEST_SEED_OFFSET: u64 = 1000;

#[derive(Parser)]
#[command(
    name = "dhif",
    version,
    about = "Dynamic high-frequency convolution: training, evaluation, and analysis tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/ and test/ splits) from a config.
    GenData {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write its report, checkpoint, and filter banks.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against a dataset directory.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `gen-data` (one split).
        #[arg(long)]
        data: PathBuf,
        /// Probability threshold binarizing predictions.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Centroid matching distance in pixels.
        #[arg(long, default_value_t = MATCH_DISTANCE)]
        match_distance: f64,
    },
    /// Audit every backward pass against central differences.
    Gradcheck {
        /// Cover kernel sizes 1, 3, and 5 instead of just 3.
        #[arg(long)]
        full: bool,
        /// Deliberately flip one backward sign to exercise failure
        /// reporting (testing hook).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Summarize a filter-bank dump in the frequency domain.
    FreqAnalyze {
        /// Filter-bank dump written by `train`.
        #[arg(long)]
        bank: PathBuf,
        /// Destination CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time dynamic vs standard convolution and report parameter counts.
    Bench {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parse `argv` and run the selected command, mapping every error onto the
/// documented exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_thread_cap().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Apply the `DHIF_THREADS` cap to the global worker pool.
fn init_thread_cap() -> Result<()> {
    let Ok(raw) = std::env::var("DHIF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| {
        Error::Config(format!("DHIF_THREADS must be a positive integer, got {raw:?}"))
    })?;
    if n == 0 {
        return Err(Error::Config(
            "DHIF_THREADS must be a positive integer, got 0".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot apply DHIF_THREADS={n}: {e}")))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, out } => train_cmd(&config, &out),
        Command::Eval {
            checkpoint,
            data,
            threshold,
            match_distance,
        } => eval_cmd(&checkpoint, &data, threshold, match_distance),
        Command::Gradcheck { full, inject_fault } => gradcheck_cmd(full, inject_fault),
        Command::FreqAnalyze { bank, out } => freq_analyze(&bank, &out),
        Command::Bench { config } => bench_cmd(&config),
    }
}

/// Generate the train/test splits described by the config's `data` section.
/// The test split offsets the master seed so the two streams never share a
/// scene.
pub fn datasets_from_config(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    config.data.validate()?;
    let train_set = generate_dataset(
        config.data.train_scenes,
        &config.data.scene,
        config.data.master_seed,
    )?;
    let test_set = generate_dataset(
        config.data.test_scenes,
        &config.data.scene,
        config.data.master_seed + TEST_SEED_OFFSET,
    )?;
    Ok((train_set, test_set))
}

fn gen_data(config_path: &Path, out: &Path) -> Result<()> {
    let config = config::load(config_path)?;
    let (train_set, test_set) = datasets_from_config(&config)?;
    let train_dir = out.join("train");
    let test_dir = out.join("test");
    write_dataset(
        &train_dir,
        &train_set,
        &config.data.scene,
        config.data.master_seed,
    )?;
    write_dataset(
        &test_dir,
        &test_set,
        &config.data.scene,
        config.data.master_seed + TEST_SEED_OFFSET,
    )?;
    println!(
        "wrote {} train + {} test scenes ({}x{}) under {}",
        train_set.len(),
        test_set.len(),
        config.data.scene.height,
        config.data.scene.width,
        out.display()
    );
    Ok(())
}

fn train_cmd(config_path: &Path, out: &Path) -> Result<()> {
    let config = config::load(config_path)?;
    config.train.validate()?;
    let (train_set, test_set) = datasets_from_config(&config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (mut net, report) = train(&train_set, &test_set, &config.train)?;

    let report_path = out.join("report.csv");
    std::fs::write(&report_path, report.to_csv()).map_err(|e| Error::io(&report_path, e))?;
    let checkpoint_path = out.join("checkpoint.txt");
    checkpoint::save_detector(&net, &checkpoint_path)?;
    let config_path_out = out.join("config.txt");
    std::fs::write(&config_path_out, config::render(&config))
        .map_err(|e| Error::io(&config_path_out, e))?;

    // Filter banks of the trained model on the first test scene — one dump
    // per dynamic layer, each consumable by `freq-analyze`.
    let probe = test_set.images[0]
        .clone()
        .reshape(&[1, 1, test_set.height, test_set.width])?;
    let mut bank_files = Vec::new();
    for (layer, bank) in net.filter_banks(&probe)? {
        let path = out.join(format!("bank_{layer}.txt"));
        std::fs::write(&path, bank.dump_to_string()).map_err(|e| Error::io(&path, e))?;
        bank_files.push(path);
    }

    let m = &report.metrics;
    println!("{}", paper_units_header());
    println!("{}", paper_units_row(m));
    eprintln!(
        "trained {} epochs in {:.1}s; wrote {}, {}{}",
        report.epochs.len(),
        report.wall_seconds,
        report_path.display(),
        checkpoint_path.display(),
        if bank_files.is_empty() {
            String::new()
        } else {
            format!(
                ", {} filter-bank dump(s)",
                bank_files.len()
            )
        }
    );
    Ok(())
}

fn eval_cmd(checkpoint_path: &Path, data: &Path, threshold: f64, match_distance: f64) -> Result<()> {
    let mut net = checkpoint::load_detector(checkpoint_path)?;
    let dataset = read_dataset(data)?;
    let metrics = evaluate_net(&mut net, &dataset, threshold, match_distance)?;
    println!("iou,niou,pd,fa");
    println!("{},{},{},{}", metrics.iou, metrics.niou, metrics.pd, metrics.fa);
    eprintln!("{}", paper_units_header());
    eprintln!("{}", paper_units_row(&metrics));
    Ok(())
}

/// Table conventions from the literature: IoU, nIoU, and Pd in units of
/// 10⁻², Fa in units of 10⁻⁵.
fn paper_units_header() -> String {
    "IoU(1e-2),nIoU(1e-2),Pd(1e-2),Fa(1e-5)".to_string()
}

fn paper_units_row(m: &MetricsReport) -> String {
    format!(
        "{:.2},{:.2},{:.2},{:.2}",
        m.iou * 100.0,
        m.niou * 100.0,
        m.pd * 100.0,
        m.fa * 1e5
    )
}

fn gradcheck_cmd(full: bool, inject_fault: bool) -> Result<()> {
    let kernel_sizes: &[usize] = if full { &[1, 3, 5] } else { &[3] };
    let reports = suite::run(kernel_sizes, inject_fault)?;
    let mut failures = 0;
    for r in &reports {
        println!(
            "{:<34} max rel err {:>12.3e} over {:>4} coords  {}",
            r.group,
            r.max_relative_error,
            r.checked,
            if r.passes() { "ok" } else { "FAIL" }
        );
        if !r.passes() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::CheckFailed(format!(
            "{failures} of {} gradient groups exceeded tolerance",
            reports.len()
        )));
    }
    println!("all {} gradient groups within tolerance", reports.len());
    Ok(())
}

fn freq_analyze(bank: &Path, out: &Path) -> Result<()> {
    let analysis = freq::analyze_bank_file(bank)?;
    std::fs::write(out, analysis.to_csv()).map_err(|e| Error::io(out, e))?;
    println!(
        "analyzed {} kernels from {}; wrote {}",
        analysis.kernel_count,
        bank.display(),
        out.display()
    );
    Ok(())
}

fn bench_cmd(config_path: &Path) -> Result<()> {
    let config = config::load(config_path)?;
    config.bench.validate()?;
    config.train.net.validate()?;
    let b = &config.bench;
    let net_cfg = &config.train.net;
    let k = net_cfg.kernel_size;
    let ch = net_cfg.channels.first().copied().unwrap_or(8);

    let mut rng = SeededRng::new(config.train.seed);
    let x1 = Tensor::from_vec(&[1, ch, b.height, b.width], rng.fill_normal(ch * b.height * b.width))?;

    // Per-op timing at matched geometry: one standard convolution vs one
    // dynamic layer, forward plus backward, single image.
    let mut conv = Conv2d::new(ch, ch, k, 1, k / 2, false)?;
    conv.init_kaiming(&mut rng);
    let conv_ms = time_per_rep(b.reps, || {
        let (y, tape) = conv.forward(&x1).unwrap();
        let gy = Tensor::zeros(y.shape());
        conv.backward(&gy, tape).unwrap();
    });

    let mut dyn_layer = DhifLayer::new(ch, ch, k, 1, k / 2, net_cfg.nonlinearity)?;
    dyn_layer.init_kaiming(&mut rng);
    let dhif_ms = time_per_rep(b.reps, || {
        let (y, tape) = dyn_layer.forward(&x1).unwrap();
        let gy = Tensor::zeros(y.shape());
        dyn_layer.backward(&gy, tape).unwrap();
    });

    // Whole-network inference throughput with and without dynamic blocks.
    let mut dynamic = MiniDetector::new(net_cfg.clone())?;
    let mut baseline = MiniDetector::new(net_cfg.baseline())?;
    let mut init_rng = SeededRng::new(config.train.seed);
    dynamic.init_kaiming(&mut init_rng);
    let mut init_rng = SeededRng::new(config.train.seed);
    baseline.init_kaiming(&mut init_rng);
    let xb = Tensor::from_vec(
        &[b.batch_size, net_cfg.in_ch, b.height, b.width],
        rng.fill_uniform(b.batch_size * net_cfg.in_ch * b.height * b.width),
    )?;
    let base_ms = time_per_rep(b.reps, || {
        baseline.predict(&xb).unwrap();
    });
    let dyn_ms = time_per_rep(b.reps, || {
        dynamic.predict(&xb).unwrap();
    });
    let base_ips = 1000.0 * b.batch_size as f64 / base_ms;
    let dyn_ips = 1000.0 * b.batch_size as f64 / dyn_ms;
    let reduction_pct = 100.0 * (base_ips - dyn_ips) / base_ips;

    let mut out = String::from("metric,value\n");
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push(',');
        out.push_str(&v);
        out.push('\n');
    };
    push("geometry", format!("{}x{}x{}x{} k={k}", b.batch_size, ch, b.height, b.width));
    push("conv_per_op_ms", format!("{conv_ms:.3}"));
    push("dhif_per_op_ms", format!("{dhif_ms:.3}"));
    push("baseline_images_per_sec", format!("{base_ips:.2}"));
    push("dynamic_images_per_sec", format!("{dyn_ips:.2}"));
    push("throughput_reduction_pct", format!("{reduction_pct:.2}"));
    push("baseline_params", baseline.param_count().to_string());
    push("dynamic_params", dynamic.param_count().to_string());
    push("extra_params", dynamic.extra_param_count().to_string());
    push("dynamic_layers", dynamic.dynamic_layers().len().to_string());
    print!("{out}");
    std::io::stdout().flush().ok();
    Ok(())
}

/// Median-free simple timer: run `f` `reps` times, return mean milliseconds.
fn time_per_rep(reps: usize, mut f: impl FnMut()) -> f64 {
    // One warm-up evaluation so allocator effects do not skew the first rep.
    f();
    let start = std::time::Instant::now();
    for _ in 0..reps {
        f();
    }
    start.elapsed().as_secs_f64() * 1000.0 / reps as f64
}
