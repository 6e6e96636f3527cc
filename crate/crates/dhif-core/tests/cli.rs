//! End-to-end tests of the `dhif` binary: every subcommand is exercised
//! through `std::process` against real files, and the exit-code contract
//! (0 success, 1 check failure, 2 config error, 3 I/O error, 4 divergence)
//! is pinned down.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dhif_core::checkpoint::load_detector;
use dhif_core::metrics::{threshold, DEFAULT_THRESHOLD};
use dhif_core::synth::{generate_dataset, write_dataset, SceneSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dhif"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dhif binary")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A config small enough that training runs in a second or two.
const TINY_CONFIG: &str = "\
net.channels = 2 4
net.dhif_levels = 2
train.epochs = 2
train.batch_size = 4
train.seed = 9
data.train_scenes = 8
data.test_scenes = 4
data.height = 32
data.width = 32
bench.batch_size = 1
bench.height = 16
bench.width = 16
bench.reps = 2
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_data_writes_both_splits_with_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.cfg", TINY_CONFIG);
    let out_dir = tmp.path().join("data");
    let out = run(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "gen-data failed: {}", stderr_of(&out));
    for (split, scenes) in [("train", 8), ("test", 4)] {
        let split_dir = out_dir.join(split);
        for i in 0..scenes {
            let name = format!("scene_{i:04}.pgm");
            assert!(split_dir.join("images").join(&name).is_file(), "{split}/{name} image");
            assert!(split_dir.join("masks").join(&name).is_file(), "{split}/{name} mask");
        }
        let manifest = std::fs::read_to_string(split_dir.join("manifest.txt")).unwrap();
        assert!(
            manifest.contains(&format!("scenes = {scenes}")),
            "{split} manifest records the scene count"
        );
    }
}

#[test]
fn train_outputs_are_bytewise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.cfg", TINY_CONFIG);
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for name in ["first", "second"] {
        let out_dir = tmp.path().join(name);
        let out = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "train failed: {}", stderr_of(&out));
        reports.push(std::fs::read(out_dir.join("report.csv")).unwrap());
        checkpoints.push(std::fs::read(out_dir.join("checkpoint.txt")).unwrap());
        assert!(
            out_dir.join("bank_enc2.txt").is_file(),
            "train writes the level-2 filter-bank dump"
        );
    }
    assert_eq!(reports[0], reports[1], "report CSVs must be byte-identical");
    assert_eq!(checkpoints[0], checkpoints[1], "checkpoints must be byte-identical");
    let header = String::from_utf8_lossy(&reports[0]);
    assert!(header.starts_with("epoch,loss,iou,niou,pd,fa"), "report header");
}

#[test]
fn zero_epoch_train_and_eval_agree_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let config_text = TINY_CONFIG.replace("train.epochs = 2", "train.epochs = 0");
    let config = write_config(tmp.path(), "run.cfg", &config_text);

    let data_dir = tmp.path().join("data");
    let out = run(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "gen-data failed: {}", stderr_of(&out));

    let train_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));

    let report = std::fs::read_to_string(train_dir.join("report.csv")).unwrap();
    let final_row = report
        .lines()
        .find(|l| l.starts_with("final,"))
        .expect("final row present");
    // final,<loss>,<iou>,<niou>,<pd>,<fa>
    let train_metrics: Vec<&str> = final_row.split(',').skip(2).collect();

    let out = run(&[
        "eval",
        "--checkpoint",
        train_dir.join("checkpoint.txt").to_str().unwrap(),
        "--data",
        data_dir.join("test").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval failed: {}", stderr_of(&out));
    let stdout = stdout_of(&out);
    let eval_row = stdout
        .lines()
        .nth(1)
        .expect("eval prints a header and one row");
    let eval_metrics: Vec<&str> = eval_row.split(',').collect();

    assert_eq!(
        train_metrics, eval_metrics,
        "metrics from the zero-epoch report and from eval must be identical strings"
    );
}

#[test]
fn eval_scores_a_self_labelled_fixture_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.cfg", TINY_CONFIG);
    let train_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));

    // Re-label a fresh dataset with the checkpoint's own thresholded
    // predictions. Evaluating the same checkpoint against its own labels
    // must then be a perfect score, exercising the full PGM round trip.
    let spec = SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    };
    let mut dataset = generate_dataset(4, &spec, 4242).unwrap();
    let mut net = load_detector(&train_dir.join("checkpoint.txt")).unwrap();
    for i in 0..dataset.len() {
        let image = dataset.images[i].clone();
        let batched = image.reshape(&[1, 1, 32, 32]).unwrap();
        let prob = net.predict(&batched).unwrap();
        let flat = prob.reshape(&[32, 32]).unwrap();
        dataset.masks[i] = threshold(&flat, DEFAULT_THRESHOLD);
    }
    let fixture = tmp.path().join("fixture");
    write_dataset(&fixture, &dataset, &spec, 4242).unwrap();

    let out = run(&[
        "eval",
        "--checkpoint",
        train_dir.join("checkpoint.txt").to_str().unwrap(),
        "--data",
        fixture.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval failed: {}", stderr_of(&out));
    let stdout = stdout_of(&out);
    let row = stdout.lines().nth(1).expect("metrics row");
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "1", "iou must be exactly 1, got row {row}");
    assert_eq!(fields[1], "1", "niou must be exactly 1, got row {row}");
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();

    // 2 — missing config file, message names the path.
    let out = run(&["gen-data", "--config", "/no/such/file.cfg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("/no/such/file.cfg"));

    // 2 — unknown key, message names it with its line number.
    let bad = write_config(tmp.path(), "bad.cfg", "net.chanels = 2 4\n");
    let out = run(&["bench", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("net.chanels"), "stderr names the bad key: {err}");

    // 2 — a config value violating a bound, message names the key.
    let zero = write_config(
        tmp.path(),
        "zero.cfg",
        &TINY_CONFIG.replace("bench.height = 16", "bench.height = 0"),
    );
    let out = run(&["bench", "--config", zero.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("bench.height"));

    // 3 — missing checkpoint.
    let out = run(&[
        "eval",
        "--checkpoint",
        "/no/such/checkpoint.txt",
        "--data",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_of(&out).contains("checkpoint.txt"));

    // 2 — unusable thread cap.
    let config = write_config(tmp.path(), "run.cfg", TINY_CONFIG);
    let out = bin()
        .env("DHIF_THREADS", "0")
        .args(["bench", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("DHIF_THREADS"));
}

#[test]
fn runaway_learning_rate_exits_with_the_divergence_code() {
    // Batch norm rescales almost any exploding activation, so a merely huge
    // learning rate still trains. A first step near the f64 ceiling pushes
    // one convolution's accumulator past infinity, and the batch statistics
    // turn that into NaN — the genuine divergence path.
    let tmp = tempfile::tempdir().unwrap();
    let config_text = TINY_CONFIG.replace(
        "train.epochs = 2",
        "train.epochs = 6\ntrain.learning_rate = 1e308",
    );
    let config = write_config(tmp.path(), "run.cfg", &config_text);
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("epoch"),
        "divergence message names the epoch: {}",
        stderr_of(&out)
    );
}

#[test]
fn gradcheck_passes_clean_and_flags_an_injected_fault() {
    let out = run(&["gradcheck"]);
    assert!(out.status.success(), "gradcheck failed: {}", stdout_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("max rel err"), "per-group lines: {text}");
    assert!(text.lines().filter(|l| l.contains("ok")).count() >= 8);

    let out = run(&["gradcheck", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1), "fault must exit 1");
    assert!(stdout_of(&out).contains("FAIL"));
}

#[test]
fn freq_analyze_summarizes_a_training_bank_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.cfg", TINY_CONFIG);
    let train_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));

    let csv = tmp.path().join("freq.csv");
    let out = run(&[
        "freq-analyze",
        "--bank",
        train_dir.join("bank_enc2.txt").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "freq-analyze failed: {}", stderr_of(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("metric,min,median,max,mean"), "CSV header: {text}");
    for row in ["dc_gain", "nyquist_gain", "coeff_sum", "highpass_ratio"] {
        assert!(text.contains(row), "summary row {row} present");
    }
}

#[test]
fn bench_reports_costs_and_parameter_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.cfg", TINY_CONFIG);
    let out = run(&["bench", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "bench failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.starts_with("metric,value"), "long-form CSV header: {text}");

    let field = |name: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(&format!("{name},")))
            .unwrap_or_else(|| panic!("bench reports {name}: {text}"))
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(
        field("dhif_per_op_ms") > field("conv_per_op_ms"),
        "a dynamic layer strictly outworks the plain convolution"
    );
    assert_eq!(field("extra_params"), 810.0, "one dynamic level at k=3");
    assert!(field("baseline_images_per_sec") > 0.0);
    assert!(field("dynamic_images_per_sec") > 0.0);
}
