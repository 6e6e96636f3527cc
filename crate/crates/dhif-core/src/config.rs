//! Plain-text run configuration for the `dhif` binary.
//!
//! One flat `section.key = value` line per setting — no nesting, no
//! quoting — so ablation sweeps are easy to generate and archive. `#`
//! comments and blank lines are ignored. Unknown keys are rejected rather
//! than skipped: a typo in a sweep config should fail loudly, not silently
//! fall back to a default. Parsing and rendering are mutually inverse
//! (parse → render → parse is a fixed point), which keeps archived configs
//! canonical.
//!
//! Sections mirror the structs they configure: `net.*` and `train.*` feed
//! [`TrainConfig`], `metrics.*` the evaluation thresholds inside it,
//! `data.*` the scene generator ([`SceneSpec`] plus dataset counts), and
//! `bench.*` the benchmark geometry. Values use the same formats as the
//! other text artifacts: integers, shortest round-trip floats, and
//! space-separated lists (`none` for an empty level set).
//!
//! Missing keys keep their defaults; only the sections a command actually
//! uses are validated, so a config whose `bench` section is nonsense still
//! trains. A missing or unreadable config file is a configuration error
//! (the path is part of the command contract), not an I/O error.

use std::collections::BTreeSet;
use std::path::Path;

use crate::blocks::BlockOrder;
use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::synth::SceneSpec;
use crate::train::TrainConfig;

/// Everything the CLI commands need, parsed from one config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

/// Dataset generation settings: how many scenes, from which master seed,
/// and the per-scene recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub master_seed: u64,
    /// Scene recipe; its `seed` field is ignored (per-scene seeds are
    /// derived from `master_seed`).
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            train_scenes: 200,
            test_scenes: 100,
            master_seed: 1000,
            scene: SceneSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 {
            return Err(Error::Config("data.train_scenes must be positive".into()));
        }
        self.scene.validate()
    }
}

/// Benchmark geometry for `dhif bench`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub height: usize,
    pub width: usize,
    /// Timing repetitions per measured operation.
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> BenchConfig {
        BenchConfig {
            batch_size: 4,
            height: 64,
            width: 64,
            reps: 5,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("bench.batch_size", self.batch_size),
            ("bench.height", self.height),
            ("bench.width", self.width),
            ("bench.reps", self.reps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        Ok(())
    }
}

/// Read and parse a config file. A missing file is a config error carrying
/// the path, because the file is named on the command line.
pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

/// Parse config text. Every line must be blank, a `#` comment, or
/// `section.key = value` with a known key and a well-formed value.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line_no = idx + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line_no}: expected `section.key = value`, got {line:?}"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line_no}: duplicate key {key}")));
        }
        apply(&mut config, key, value)
            .map_err(|e| Error::Config(format!("line {line_no}: {e}")))?;
    }
    Ok(config)
}

/// Render a config in canonical form: every key, fixed order, one line
/// each. `parse(render(c)) == c` for any `c` that parses.
pub fn render(config: &RunConfig) -> String {
    let net = &config.train.net;
    let scene = &config.data.scene;
    let levels = if net.dhif_levels.is_empty() {
        "none".to_string()
    } else {
        net.dhif_levels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    };
    let channels = net
        .channels
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    line("net.in_ch", net.in_ch.to_string());
    line("net.channels", channels);
    line("net.kernel_size", net.kernel_size.to_string());
    line("net.dhif_levels", levels);
    line("net.nonlinearity", net.nonlinearity.name().to_string());
    line("net.block_order", net.block_order.name().to_string());
    line("train.epochs", config.train.epochs.to_string());
    line("train.batch_size", config.train.batch_size.to_string());
    line("train.learning_rate", config.train.learning_rate.to_string());
    line("train.lr_decay", config.train.lr_decay.to_string());
    line("train.lr_decay_every", config.train.lr_decay_every.to_string());
    line("train.seed", config.train.seed.to_string());
    line("metrics.threshold", config.train.threshold.to_string());
    line("metrics.match_distance", config.train.match_distance.to_string());
    line("data.train_scenes", config.data.train_scenes.to_string());
    line("data.test_scenes", config.data.test_scenes.to_string());
    line("data.master_seed", config.data.master_seed.to_string());
    line("data.height", scene.height.to_string());
    line("data.width", scene.width.to_string());
    line("data.n_gratings", scene.n_gratings.to_string());
    line("data.noise_floor", scene.noise_floor.to_string());
    line("data.n_edges", scene.n_edges.to_string());
    line("data.n_corners", scene.n_corners.to_string());
    line("data.n_blobs", scene.n_blobs.to_string());
    line("data.n_clouds", scene.n_clouds.to_string());
    line("data.targets_min", scene.targets_min.to_string());
    line("data.targets_max", scene.targets_max.to_string());
    line("data.sigma_min", scene.sigma_min.to_string());
    line("data.sigma_max", scene.sigma_max.to_string());
    line("data.amp_min", scene.amp_min.to_string());
    line("data.amp_max", scene.amp_max.to_string());
    line("data.noise_density", scene.noise_density.to_string());
    line("bench.batch_size", config.bench.batch_size.to_string());
    line("bench.height", config.bench.height.to_string());
    line("bench.width", config.bench.width.to_string());
    line("bench.reps", config.bench.reps.to_string());
    out
}

fn apply(config: &mut RunConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let bad = |what: &str| format!("{key}: {what} {value:?}");
    let as_usize = || value.parse::<usize>().map_err(|_| bad("not a count:"));
    let as_u64 = || value.parse::<u64>().map_err(|_| bad("not a seed:"));
    let as_f64 = || value.parse::<f64>().map_err(|_| bad("not a number:"));
    match key {
        "net.in_ch" => config.train.net.in_ch = as_usize()?,
        "net.channels" => {
            config.train.net.channels = value
                .split_whitespace()
                .map(|f| f.parse::<usize>().map_err(|_| bad("bad width in")))
                .collect::<std::result::Result<_, _>>()?;
        }
        "net.kernel_size" => config.train.net.kernel_size = as_usize()?,
        "net.dhif_levels" => {
            config.train.net.dhif_levels = if value == "none" {
                BTreeSet::new()
            } else {
                value
                    .split_whitespace()
                    .map(|f| f.parse::<usize>().map_err(|_| bad("bad level in")))
                    .collect::<std::result::Result<_, _>>()?
            };
        }
        "net.nonlinearity" => {
            config.train.net.nonlinearity =
                Activation::parse(value).map_err(|e| format!("{key}: {e}"))?;
        }
        "net.block_order" => {
            config.train.net.block_order =
                BlockOrder::parse(value).map_err(|e| format!("{key}: {e}"))?;
        }
        "train.epochs" => config.train.epochs = as_usize()?,
        "train.batch_size" => config.train.batch_size = as_usize()?,
        "train.learning_rate" => config.train.learning_rate = as_f64()?,
        "train.lr_decay" => config.train.lr_decay = as_f64()?,
        "train.lr_decay_every" => config.train.lr_decay_every = as_usize()?,
        "train.seed" => config.train.seed = as_u64()?,
        "metrics.threshold" => config.train.threshold = as_f64()?,
        "metrics.match_distance" => config.train.match_distance = as_f64()?,
        "data.train_scenes" => config.data.train_scenes = as_usize()?,
        "data.test_scenes" => config.data.test_scenes = as_usize()?,
        "data.master_seed" => config.data.master_seed = as_u64()?,
        "data.height" => config.data.scene.height = as_usize()?,
        "data.width" => config.data.scene.width = as_usize()?,
        "data.n_gratings" => config.data.scene.n_gratings = as_usize()?,
        "data.noise_floor" => config.data.scene.noise_floor = as_f64()?,
        "data.n_edges" => config.data.scene.n_edges = as_usize()?,
        "data.n_corners" => config.data.scene.n_corners = as_usize()?,
        "data.n_blobs" => config.data.scene.n_blobs = as_usize()?,
        "data.n_clouds" => config.data.scene.n_clouds = as_usize()?,
        "data.targets_min" => config.data.scene.targets_min = as_usize()?,
        "data.targets_max" => config.data.scene.targets_max = as_usize()?,
        "data.sigma_min" => config.data.scene.sigma_min = as_f64()?,
        "data.sigma_max" => config.data.scene.sigma_max = as_f64()?,
        "data.amp_min" => config.data.scene.amp_min = as_f64()?,
        "data.amp_max" => config.data.scene.amp_max = as_f64()?,
        "data.noise_density" => config.data.scene.noise_density = as_f64()?,
        "bench.batch_size" => config.bench.batch_size = as_usize()?,
        "bench.height" => config.bench.height = as_usize()?,
        "bench.width" => config.bench.width = as_usize()?,
        "bench.reps" => config.bench.reps = as_usize()?,
        other => return Err(format!("unknown key {other:?}")),
    }
    Ok(())
}
