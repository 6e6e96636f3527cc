//! Frequency-domain characterization of convolution kernels.
//!
//! The interesting question about a generated filter is *where its energy
//! sits*: a detector that suppresses smooth background and passes point
//! targets should produce kernels with small response at DC (zero frequency,
//! i.e. flat regions) and large response near Nyquist (pixel-scale
//! alternation). This module computes the zero-padded 2-D DFT magnitude of a
//! kernel by the row-column method — small kernels on a small grid make an
//! FFT pointless — plus the two closed-form endpoints:
//!
//! * DC gain `|Σ w|`: the response to a constant input;
//! * Nyquist gain `|Σ w·(−1)^(r+c)|`: the response to the checkerboard.
//!
//! [`analyze_bank`] applies the same summaries to every kernel of a dynamic
//! filter-bank dump (see [`crate::dhif::FilterBank::write_dump`]).

use std::io::Read;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default DFT grid size for [`analyze_kernel`].
pub const DEFAULT_DFT_SIZE: usize = 64;

/// Magnitude spectrum of one kernel on an `n × n` grid.
#[derive(Debug, Clone)]
pub struct FrequencyResponse {
    pub k: usize,
    pub n: usize,
    /// `[n, n]` magnitudes; index `(u, v)` is the response at vertical
    /// frequency `u/n` and horizontal frequency `v/n` cycles per pixel.
    pub magnitude: Tensor,
    /// `|Σ w|`, equals `magnitude[0, 0]`.
    pub dc_gain: f64,
    /// `|Σ w·(−1)^(r+c)|`, equals `magnitude[n/2, n/2]`.
    pub nyquist_gain: f64,
    /// Signed coefficient sum `Σ w`.
    pub coeff_sum: f64,
}

/// Zero-padded 2-D DFT magnitude of a `[k, k]` kernel on an `n × n` grid.
/// `n` must be even and at least `k` so the Nyquist bin `(n/2, n/2)` exists.
pub fn analyze_kernel(kernel: &Tensor, n: usize) -> Result<FrequencyResponse> {
    let k = match *kernel.shape() {
        [k, k2] if k == k2 => k,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "analyze_kernel expects a square [k, k] kernel, got {:?}",
                kernel.shape()
            )))
        }
    };
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "DFT size {n} is smaller than the kernel ({k})"
        )));
    }
    if n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "DFT size must be even to expose the Nyquist bin, got {n}"
        )));
    }
    let w = kernel.data();

    // Twiddle table: e^(−2πi·j/n) for j in 0..n, indexed by products mod n.
    let mut cos_t = vec![0.0; n];
    let mut sin_t = vec![0.0; n];
    for (j, (c, s)) in cos_t.iter_mut().zip(sin_t.iter_mut()).enumerate() {
        let angle = -2.0 * std::f64::consts::PI * j as f64 / n as f64;
        *c = angle.cos();
        *s = angle.sin();
    }

    // Row pass: T[r][v] = Σ_c w[r,c]·e^(−2πi·v·c/n) for the k nonzero rows.
    let mut t_re = vec![0.0; k * n];
    let mut t_im = vec![0.0; k * n];
    for r in 0..k {
        for v in 0..n {
            let mut re = 0.0;
            let mut im = 0.0;
            for c in 0..k {
                let tw = (v * c) % n;
                let val = w[r * k + c];
                re += val * cos_t[tw];
                im += val * sin_t[tw];
            }
            t_re[r * n + v] = re;
            t_im[r * n + v] = im;
        }
    }

    // Column pass: H[u][v] = Σ_r T[r][v]·e^(−2πi·u·r/n).
    let mut magnitude = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut re = 0.0;
            let mut im = 0.0;
            for r in 0..k {
                let tw = (u * r) % n;
                let (tr, ti) = (t_re[r * n + v], t_im[r * n + v]);
                re += tr * cos_t[tw] - ti * sin_t[tw];
                im += tr * sin_t[tw] + ti * cos_t[tw];
            }
            magnitude[u * n + v] = (re * re + im * im).sqrt();
        }
    }

    let coeff_sum: f64 = w.iter().sum();
    let mut nyquist = 0.0;
    for r in 0..k {
        for c in 0..k {
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            nyquist += sign * w[r * k + c];
        }
    }
    Ok(FrequencyResponse {
        k,
        n,
        magnitude: Tensor::from_vec(&[n, n], magnitude)?,
        dc_gain: coeff_sum.abs(),
        nyquist_gain: nyquist.abs(),
        coeff_sum,
    })
}

/// Order statistics of one summary quantity across a bank's kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
}

impl Distribution {
    fn from_values(values: &mut [f64]) -> Distribution {
        assert!(!values.is_empty());
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        };
        Distribution {
            min: values[0],
            median,
            max: values[n - 1],
            mean: values.iter().sum::<f64>() / n as f64,
        }
    }
}

/// Summary statistics over every kernel in a filter-bank dump.
#[derive(Debug, Clone)]
pub struct BankAnalysis {
    pub k: usize,
    pub kernel_count: usize,
    pub dc_gain: Distribution,
    pub nyquist_gain: Distribution,
    pub coeff_sum: Distribution,
    /// nyquist / (dc + 1e-12): > 1 means the kernel emphasizes the highest
    /// representable frequency over flat content.
    pub highpass_ratio: Distribution,
}

impl BankAnalysis {
    /// Render as CSV: one row per summary quantity, columns are order
    /// statistics. The first line is a plain CSV header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,min,median,max,mean\n");
        for (name, d) in [
            ("dc_gain", &self.dc_gain),
            ("nyquist_gain", &self.nyquist_gain),
            ("coeff_sum", &self.coeff_sum),
            ("highpass_ratio", &self.highpass_ratio),
        ] {
            out.push_str(&format!("{name},{},{},{},{}\n", d.min, d.median, d.max, d.mean));
        }
        out
    }
}

/// One parsed kernel of a bank dump: output location, filter index, taps in
/// row-major order.
#[derive(Debug, Clone)]
pub struct BankKernel {
    pub row: usize,
    pub col: usize,
    pub filter: usize,
    pub taps: Vec<f64>,
}

/// Parse the `r c i m value` dump format. `origin` names the source in
/// error messages. Lines starting with `#` and blank lines are skipped.
pub fn parse_bank_dump(text: &str, origin: &str) -> Result<Vec<BankKernel>> {
    use std::collections::BTreeMap;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    // (row, col, filter) → (tap index → value, first line seen)
    let mut groups: BTreeMap<(usize, usize, usize), (BTreeMap<usize, f64>, usize)> = BTreeMap::new();
    let mut max_tap = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(
                lineno,
                format!("expected 5 fields `r c i m value`, found {}", fields.len()),
            ));
        }
        let mut ints = [0usize; 4];
        for (slot, field) in ints.iter_mut().zip(&fields[..4]) {
            *slot = field.parse().map_err(|_| {
                parse_err(lineno, format!("expected a non-negative integer, found {field:?}"))
            })?;
        }
        let value: f64 = fields[4]
            .parse()
            .map_err(|_| parse_err(lineno, format!("expected a number, found {:?}", fields[4])))?;
        if !value.is_finite() {
            return Err(parse_err(lineno, format!("coefficient is not finite: {value}")));
        }
        let [r, c, i, m] = ints;
        max_tap = max_tap.max(m);
        let (taps, _) = groups.entry((r, c, i)).or_insert_with(|| (BTreeMap::new(), lineno));
        if taps.insert(m, value).is_some() {
            return Err(parse_err(
                lineno,
                format!("duplicate coefficient for location ({r}, {c}) filter {i} tap {m}"),
            ));
        }
    }
    if groups.is_empty() {
        return Err(parse_err(1, "dump contains no coefficients".into()));
    }
    let k2 = max_tap + 1;
    let k = (k2 as f64).sqrt().round() as usize;
    if k * k != k2 {
        return Err(parse_err(
            1,
            format!("tap indices run to {max_tap}, but {k2} is not a square kernel size"),
        ));
    }
    let mut kernels = Vec::with_capacity(groups.len());
    for ((r, c, i), (taps, first_line)) in groups {
        if taps.len() != k2 {
            return Err(parse_err(
                first_line,
                format!(
                    "location ({r}, {c}) filter {i} has {} taps, expected {k2}",
                    taps.len()
                ),
            ));
        }
        kernels.push(BankKernel {
            row: r,
            col: c,
            filter: i,
            taps: taps.into_values().collect(),
        });
    }
    Ok(kernels)
}

/// Closed-form summaries for every kernel of a parsed bank.
pub fn analyze_bank(kernels: &[BankKernel]) -> Result<BankAnalysis> {
    if kernels.is_empty() {
        return Err(Error::InvalidArgument("analyze_bank: no kernels".into()));
    }
    let k2 = kernels[0].taps.len();
    let k = (k2 as f64).sqrt().round() as usize;
    let mut dc = Vec::with_capacity(kernels.len());
    let mut nyq = Vec::with_capacity(kernels.len());
    let mut sums = Vec::with_capacity(kernels.len());
    let mut ratio = Vec::with_capacity(kernels.len());
    for kernel in kernels {
        if kernel.taps.len() != k2 {
            return Err(Error::InvalidArgument(format!(
                "analyze_bank: kernel at ({}, {}) filter {} has {} taps, expected {k2}",
                kernel.row,
                kernel.col,
                kernel.filter,
                kernel.taps.len()
            )));
        }
        let sum: f64 = kernel.taps.iter().sum();
        let mut n = 0.0;
        for r in 0..k {
            for c in 0..k {
                let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                n += sign * kernel.taps[r * k + c];
            }
        }
        dc.push(sum.abs());
        nyq.push(n.abs());
        sums.push(sum);
        ratio.push(n.abs() / (sum.abs() + 1e-12));
    }
    Ok(BankAnalysis {
        k,
        kernel_count: kernels.len(),
        dc_gain: Distribution::from_values(&mut dc),
        nyquist_gain: Distribution::from_values(&mut nyq),
        coeff_sum: Distribution::from_values(&mut sums),
        highpass_ratio: Distribution::from_values(&mut ratio),
    })
}

/// Read and analyze a dump file in one step.
pub fn analyze_bank_file(path: &std::path::Path) -> Result<BankAnalysis> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    let kernels = parse_bank_dump(&text, &path.display().to_string())?;
    analyze_bank(&kernels)
}
