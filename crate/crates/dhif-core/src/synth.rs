//! Deterministic synthetic infrared-like scene generation.
//!
//! Each scene layers, in a fixed draw order from one seeded stream:
//!
//! 1. a smooth background — low-frequency cosine gratings plus a blurred
//!    noise floor, affinely normalized into `[0.1, 0.45]`,
//! 2. structural clutter — step edges, bright corner wedges, compact bright
//!    blobs (radius 3–6 px, deliberately rivaling target contrast), and
//!    broken-cloud patches from thresholded blurred noise; the clutter-laden
//!    base is clamped to `[0, 0.8]` so targets keep ≥ 0.15 of visible
//!    headroom,
//! 3. one to three small isotropic Gaussian targets (σ ∈ [0.7, 2.0] px,
//!    amplitude ∈ [0.3, 0.8]) with centers ≥ 8 px apart and ≥ 4 px from the
//!    borders,
//! 4. optional salt-and-pepper noise.
//!
//! The ground-truth mask marks pixels whose summed target contribution
//! reaches half the peak amplitude of the locally dominant target; clutter
//! never enters the mask. Everything is a pure function of the spec, so
//! scenes regenerate bit-identically and datasets can be built in parallel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pgm;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

/// Minimum distance between target centers, in pixels.
pub const TARGET_SEPARATION: f64 = 8.0;
/// Minimum distance from a target center to the image border, in pixels.
pub const TARGET_MARGIN: usize = 4;
/// Upper clamp for the target-free base image, leaving amplitude headroom.
pub const BASE_CEILING: f64 = 0.8;
/// Total placement attempts before giving up on a scene.
pub const PLACEMENT_ATTEMPTS: usize = 1000;
/// A mask pixel needs summed target contribution ≥ this fraction of the
/// dominant target's peak amplitude.
pub const MASK_HALF_PEAK: f64 = 0.5;

const BG_LOW: f64 = 0.10;
const BG_HIGH: f64 = 0.45;
const CLOUD_THRESHOLD: f64 = 0.65;

/// Generative description of one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Low-frequency cosine gratings summed into the background.
    pub n_gratings: usize,
    /// Relative weight of the blurred-noise floor in the background.
    pub noise_floor: f64,
    /// Step-edge clutter count.
    pub n_edges: usize,
    /// Bright corner-wedge clutter count.
    pub n_corners: usize,
    /// Compact bright-blob clutter count (radius 3–6 px).
    pub n_blobs: usize,
    /// Broken-cloud patch count (thresholded blurred noise).
    pub n_clouds: usize,
    pub targets_min: usize,
    pub targets_max: usize,
    /// Target Gaussian width range, pixels.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Target peak amplitude range, fraction of dynamic range.
    pub amp_min: f64,
    pub amp_max: f64,
    /// Salt-and-pepper density applied after mask extraction.
    pub noise_density: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// Heavy-clutter 64×64 default: the blob and cloud primitives rival
    /// target contrast so that plain local-contrast detection has a real
    /// false-alarm problem.
    fn default() -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            n_gratings: 4,
            noise_floor: 1.0,
            n_edges: 2,
            n_corners: 2,
            n_blobs: 3,
            n_clouds: 2,
            targets_min: 1,
            targets_max: 3,
            sigma_min: 0.7,
            sigma_max: 2.0,
            amp_min: 0.3,
            amp_max: 0.8,
            noise_density: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(format!(
                "scene extent {}×{} too small; need at least 16×16",
                self.height, self.width
            )));
        }
        if self.targets_min > self.targets_max {
            return Err(Error::InvalidArgument(format!(
                "target count range [{}, {}] is empty",
                self.targets_min, self.targets_max
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::InvalidArgument(format!(
                "target sigma range [{}, {}] invalid",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.amp_min > 0.0 && self.amp_min <= self.amp_max && self.amp_max <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target amplitude range [{}, {}] must sit inside (0, 1]",
                self.amp_min, self.amp_max
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_density) {
            return Err(Error::InvalidArgument(format!(
                "noise density {} outside [0, 1]",
                self.noise_density
            )));
        }
        Ok(())
    }
}

/// One placed target (integer center so the peak lands on a pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub row: usize,
    pub col: usize,
    pub sigma: f64,
    pub amplitude: f64,
}

/// A generated scene with its provenance.
#[derive(Debug, Clone)]
pub struct Scene {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` binary ground truth.
    pub mask: Tensor,
    pub targets: Vec<TargetSpec>,
    /// The target-free base (background + clutter, clamped to `[0, 0.8]`) —
    /// kept so salience properties can be audited.
    pub clutter_only: Tensor,
}

/// Generate one scene; see the module docs for the layering order.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Tensor, Tensor)> {
    let scene = generate_scene_detailed(spec)?;
    Ok((scene.image, scene.mask))
}

pub fn generate_scene_detailed(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut rng = SeededRng::new(spec.seed);

    // --- Background: gratings + blurred noise floor, mapped to [0.1, 0.45].
    let mut bg = vec![0.0f64; n];
    for _ in 0..spec.n_gratings {
        let amp = rng.uniform_in(0.5, 1.0);
        let period = rng.uniform_in(h as f64 / 4.0, h as f64);
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        let (st, ct) = theta.sin_cos();
        let k = 2.0 * std::f64::consts::PI / period;
        for r in 0..h {
            for c in 0..w {
                bg[r * w + c] += amp * (k * (r as f64 * ct + c as f64 * st) + phase).cos();
            }
        }
    }
    if spec.noise_floor > 0.0 {
        let noise = rng.fill_normal(n);
        let blurred = gaussian_blur(&noise, h, w, 2.0);
        for (b, v) in bg.iter_mut().zip(blurred) {
            *b += spec.noise_floor * v;
        }
    }
    normalize_range(&mut bg, BG_LOW, BG_HIGH);

    // --- Clutter.
    let mut base = bg;
    for _ in 0..spec.n_edges {
        let r0 = rng.uniform_in(0.0, h as f64);
        let c0 = rng.uniform_in(0.0, w as f64);
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        let amp = rng.uniform_in(0.1, 0.25);
        let (st, ct) = theta.sin_cos();
        for r in 0..h {
            for c in 0..w {
                if (r as f64 - r0) * ct + (c as f64 - c0) * st >= 0.0 {
                    base[r * w + c] += amp;
                }
            }
        }
    }
    for _ in 0..spec.n_corners {
        let r0 = rng.below(h);
        let c0 = rng.below(w);
        let quadrant = rng.below(4);
        let amp = rng.uniform_in(0.1, 0.25);
        for r in 0..h {
            for c in 0..w {
                let inside = match quadrant {
                    0 => r >= r0 && c >= c0,
                    1 => r >= r0 && c <= c0,
                    2 => r <= r0 && c >= c0,
                    _ => r <= r0 && c <= c0,
                };
                if inside {
                    base[r * w + c] += amp;
                }
            }
        }
    }
    for _ in 0..spec.n_blobs {
        let r0 = rng.uniform_in(0.0, h as f64);
        let c0 = rng.uniform_in(0.0, w as f64);
        let radius = rng.uniform_in(3.0, 6.0);
        let amp = rng.uniform_in(0.2, 0.5);
        for r in 0..h {
            for c in 0..w {
                let d = ((r as f64 - r0).powi(2) + (c as f64 - c0).powi(2)).sqrt();
                if d <= radius {
                    let t = std::f64::consts::FRAC_PI_2 * d / radius;
                    base[r * w + c] += amp * t.cos().powi(2);
                }
            }
        }
    }
    for _ in 0..spec.n_clouds {
        let noise = rng.fill_normal(n);
        let amp = rng.uniform_in(0.1, 0.3);
        let mut blurred = gaussian_blur(&noise, h, w, 3.0);
        normalize_range(&mut blurred, 0.0, 1.0);
        for (b, v) in base.iter_mut().zip(blurred) {
            if v > CLOUD_THRESHOLD {
                *b += amp * (v - CLOUD_THRESHOLD) / (1.0 - CLOUD_THRESHOLD);
            }
        }
    }
    for v in &mut base {
        *v = v.clamp(0.0, BASE_CEILING);
    }

    // --- Targets.
    let span = spec.targets_max - spec.targets_min;
    let count = spec.targets_min + rng.below(span + 1);
    let mut targets: Vec<TargetSpec> = Vec::with_capacity(count);
    let mut attempts = 0;
    while targets.len() < count {
        if attempts >= PLACEMENT_ATTEMPTS {
            return Err(Error::Generation(format!(
                "placed only {} of {count} targets after {PLACEMENT_ATTEMPTS} attempts \
                 (separation {TARGET_SEPARATION} px, margin {TARGET_MARGIN} px, extent {h}×{w})",
                targets.len()
            )));
        }
        attempts += 1;
        let row = TARGET_MARGIN + rng.below(h - 2 * TARGET_MARGIN);
        let col = TARGET_MARGIN + rng.below(w - 2 * TARGET_MARGIN);
        let far_enough = targets.iter().all(|t| {
            let dr = t.row as f64 - row as f64;
            let dc = t.col as f64 - col as f64;
            (dr * dr + dc * dc).sqrt() >= TARGET_SEPARATION
        });
        if !far_enough {
            continue;
        }
        let sigma = rng.uniform_in(spec.sigma_min, spec.sigma_max);
        let amplitude = rng.uniform_in(spec.amp_min, spec.amp_max);
        targets.push(TargetSpec {
            row,
            col,
            sigma,
            amplitude,
        });
    }

    let mut total = vec![0.0f64; n];
    let mut dominant_contrib = vec![0.0f64; n];
    let mut dominant_amp = vec![0.0f64; n];
    for t in &targets {
        let inv = 1.0 / (2.0 * t.sigma * t.sigma);
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - t.row as f64).powi(2) + (c as f64 - t.col as f64).powi(2);
                let v = t.amplitude * (-d2 * inv).exp();
                let idx = r * w + c;
                total[idx] += v;
                if v > dominant_contrib[idx] {
                    dominant_contrib[idx] = v;
                    dominant_amp[idx] = t.amplitude;
                }
            }
        }
    }
    let mut mask = vec![0.0f64; n];
    for idx in 0..n {
        if dominant_amp[idx] > 0.0 && total[idx] >= MASK_HALF_PEAK * dominant_amp[idx] {
            mask[idx] = 1.0;
        }
    }
    let mut image: Vec<f64> = base
        .iter()
        .zip(&total)
        .map(|(b, t)| (b + t).clamp(0.0, 1.0))
        .collect();

    // --- Impulse noise, after the mask is fixed.
    if spec.noise_density > 0.0 {
        salt_pepper_in_place(&mut image, spec.noise_density, &mut rng);
    }

    // Snap intensities to the 16-bit grid the PGM writer uses, so a scene
    // is bit-identical whether consumed in memory or round-tripped through
    // a dataset directory.
    let maxval = pgm::PGM_MAXVAL as f64;
    for v in &mut image {
        *v = (*v * maxval).round() / maxval;
    }

    Ok(Scene {
        image: Tensor::from_vec(&[1, h, w], image)?,
        mask: Tensor::from_vec(&[h, w], mask)?,
        targets,
        clutter_only: Tensor::from_vec(&[h, w], base)?,
    })
}

/// Replace each pixel independently: probability `p/2` → 1, `p/2` → 0,
/// otherwise unchanged.
pub fn add_salt_pepper(image: &Tensor, p: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "salt-and-pepper density {p} outside [0, 1]"
        )));
    }
    let mut data = image.data().to_vec();
    salt_pepper_in_place(&mut data, p, rng);
    Tensor::from_vec(image.shape(), data)
}

fn salt_pepper_in_place(data: &mut [f64], p: f64, rng: &mut SeededRng) {
    for v in data {
        let u = rng.uniform();
        if u < p / 2.0 {
            *v = 1.0;
        } else if u < p {
            *v = 0.0;
        }
    }
}

/// Separable Gaussian blur with clamp-to-edge boundaries.
fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 * inv).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let cc = (c as isize + j as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * data[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let rr = (r as isize + j as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Affinely map `data` onto `[lo, hi]`; constant fields land on the
/// midpoint.
fn normalize_range(data: &mut [f64], lo: f64, hi: f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in data.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    if max - min < 1e-12 {
        let mid = 0.5 * (lo + hi);
        for v in data {
            *v = mid;
        }
        return;
    }
    let scale = (hi - lo) / (max - min);
    for v in data {
        *v = lo + (*v - min) * scale;
    }
}

/// An in-memory dataset of image/mask pairs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// Per scene: `[1, H, W]`.
    pub images: Vec<Tensor>,
    /// Per scene: `[H, W]` binary.
    pub masks: Vec<Tensor>,
    pub seeds: Vec<u64>,
    pub targets: Vec<Vec<TargetSpec>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn total_targets(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

/// Generate `n` scenes; scene `i` uses the seed derived from
/// `(master_seed, i)` so any scene regenerates independently.
pub fn generate_dataset(n: usize, base_spec: &SceneSpec, master_seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "dataset needs at least one scene".into(),
        ));
    }
    base_spec.validate()?;
    let scenes: Vec<Result<(u64, Scene)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, i as u64);
            let spec = SceneSpec {
                seed,
                ..base_spec.clone()
            };
            Ok((seed, generate_scene_detailed(&spec)?))
        })
        .collect();
    let mut dataset = Dataset {
        height: base_spec.height,
        width: base_spec.width,
        images: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        seeds: Vec::with_capacity(n),
        targets: Vec::with_capacity(n),
    };
    for entry in scenes {
        let (seed, scene) = entry?;
        dataset.images.push(scene.image);
        dataset.masks.push(scene.mask);
        dataset.seeds.push(seed);
        dataset.targets.push(scene.targets);
    }
    Ok(dataset)
}

/// Plain-text manifest: one block per scene with its derived seed and the
/// placed targets (`target = row col sigma amplitude`).
pub fn manifest_string(dataset: &Dataset, base_spec: &SceneSpec, master_seed: u64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenes = {}", dataset.len());
    let _ = writeln!(out, "height = {}", dataset.height);
    let _ = writeln!(out, "width = {}", dataset.width);
    let _ = writeln!(out, "master_seed = {master_seed}");
    let _ = writeln!(out, "noise_density = {}", base_spec.noise_density);
    for i in 0..dataset.len() {
        let _ = writeln!(out);
        let _ = writeln!(out, "scene = {i}");
        let _ = writeln!(out, "seed = {}", dataset.seeds[i]);
        let _ = writeln!(out, "targets = {}", dataset.targets[i].len());
        for t in &dataset.targets[i] {
            let _ = writeln!(
                out,
                "target = {} {} {} {}",
                t.row, t.col, t.sigma, t.amplitude
            );
        }
    }
    out
}

/// Write `images/scene_NNNN.pgm`, `masks/scene_NNNN.pgm`, and
/// `manifest.txt` under `dir`.
pub fn write_dataset(
    dir: &Path,
    dataset: &Dataset,
    base_spec: &SceneSpec,
    master_seed: u64,
) -> Result<()> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    for i in 0..dataset.len() {
        write_pgm_scene(&images_dir, i, &dataset.images[i])?;
        write_pgm_scene(&masks_dir, i, &dataset.masks[i])?;
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(
        &manifest_path,
        manifest_string(dataset, base_spec, master_seed),
    )
    .map_err(|e| Error::io(&manifest_path, e))
}

fn write_pgm_scene(dir: &Path, index: usize, image: &Tensor) -> Result<()> {
    pgm::write_pgm(&dir.join(format!("scene_{index:04}.pgm")), image)
}

/// Read a dataset written by [`write_dataset`]. Masks are re-binarized at
/// 0.5 (they were stored as 0/1 exactly, so this is lossless).
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = parse_manifest(&text, &manifest_path)?;
    let mut images = Vec::with_capacity(manifest.scenes);
    let mut masks = Vec::with_capacity(manifest.scenes);
    for i in 0..manifest.scenes {
        let img = pgm::read_pgm(&dir.join("images").join(format!("scene_{i:04}.pgm")))?;
        let mask = pgm::read_pgm(&dir.join("masks").join(format!("scene_{i:04}.pgm")))?;
        let (h, w) = (manifest.height, manifest.width);
        if img.shape() != [h, w] || mask.shape() != [h, w] {
            return Err(Error::InvalidArgument(format!(
                "scene {i}: stored extents {:?}/{:?} disagree with manifest {h}×{w}",
                img.shape(),
                mask.shape()
            )));
        }
        images.push(img.reshape(&[1, h, w])?);
        masks.push(mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
    }
    Ok(Dataset {
        height: manifest.height,
        width: manifest.width,
        images,
        masks,
        seeds: manifest.seeds,
        targets: manifest.targets,
    })
}

struct Manifest {
    scenes: usize,
    height: usize,
    width: usize,
    seeds: Vec<u64>,
    targets: Vec<Vec<TargetSpec>>,
}

fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut scenes = None;
    let mut height = None;
    let mut width = None;
    let mut seeds = Vec::new();
    let mut targets: Vec<Vec<TargetSpec>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| err(line_no, format!("expected an integer for {key}, got {v:?}")))
        };
        match key {
            "scenes" => scenes = Some(parse_usize(value)?),
            "height" => height = Some(parse_usize(value)?),
            "width" => width = Some(parse_usize(value)?),
            "master_seed" | "noise_density" | "targets" => {}
            "scene" => {
                let idx = parse_usize(value)?;
                if idx != targets.len() {
                    return Err(err(
                        line_no,
                        format!("scene blocks out of order: expected {}, got {idx}", targets.len()),
                    ));
                }
                targets.push(Vec::new());
            }
            "seed" => {
                let seed = value.parse::<u64>().map_err(|_| {
                    err(line_no, format!("expected an integer seed, got {value:?}"))
                })?;
                seeds.push(seed);
            }
            "target" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(err(
                        line_no,
                        format!("target line needs `row col sigma amplitude`, got {value:?}"),
                    ));
                }
                let row = parts[0].parse::<usize>();
                let col = parts[1].parse::<usize>();
                let sigma = parts[2].parse::<f64>();
                let amplitude = parts[3].parse::<f64>();
                match (row, col, sigma, amplitude) {
                    (Ok(row), Ok(col), Ok(sigma), Ok(amplitude)) => {
                        let current = targets.last_mut().ok_or_else(|| {
                            err(line_no, "target line before any scene block".into())
                        })?;
                        current.push(TargetSpec {
                            row,
                            col,
                            sigma,
                            amplitude,
                        });
                    }
                    _ => {
                        return Err(err(line_no, format!("malformed target numbers: {value:?}")))
                    }
                }
            }
            other => return Err(err(line_no, format!("unknown manifest key {other:?}"))),
        }
    }
    let scenes = scenes.ok_or_else(|| err(0, "manifest missing `scenes`".into()))?;
    let height = height.ok_or_else(|| err(0, "manifest missing `height`".into()))?;
    let width = width.ok_or_else(|| err(0, "manifest missing `width`".into()))?;
    if seeds.len() != scenes || targets.len() != scenes {
        return Err(err(
            0,
            format!(
                "manifest declares {scenes} scenes but lists {} seeds / {} blocks",
                seeds.len(),
                targets.len()
            ),
        ));
    }
    Ok(Manifest {
        scenes,
        height,
        width,
        seeds,
        targets,
    })
}
