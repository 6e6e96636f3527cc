//! Dense row-major `f64` tensors plus the patch/geometry helpers that every
//! convolution-like operator in this crate is built on.
//!
//! The layout convention is fixed: feature maps are `[C, H, W]` per sample
//! and `[N, C, H, W]` in batches, weights are `[C_out, C_in, k, k]`, and the
//! `im2col` patch matrix is `[C · k², out_h · out_w]` — one row per
//! channel/tap pair (channel-major then tap-major), columns enumerating
//! output locations in row-major order. Several text formats (filter-bank
//! dumps, checkpoints) serialize windows channel-major-then-tap-major too,
//! so the ordering is part of the crate contract, not an implementation
//! detail.

use crate::error::{Error, Result};

/// Dense tensor: a shape vector and a row-major data buffer whose length
/// always equals the product of the dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {} elements to {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major element read by multi-index; debug builds check bounds per
    /// dimension. Convenience for tests and small code paths, not hot loops.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0usize;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i], "index {index:?} out of {:?}", self.shape);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidArgument(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn reduce_sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reduce_mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.reduce_sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2-D matrix product `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::InvalidArgument(format!(
                "matmul inner dimensions differ: {:?} × {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_slices(&self.data, &other.data, &mut out, m, k, n);
        Tensor::from_vec(&[m, n], out)
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`, all row-major slices. Thin wrapper over the
/// tuned GEMM in `matrixmultiply`; everything compute-bound routes through
/// here.
pub fn matmul_slices(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`matmul_slices`] with the first operand used transposed:
/// `c[k,n] = aᵀ[k,m] · b[m,n]` where `a` is stored `[m, k]` row-major.
pub fn matmul_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if k == 0 || n == 0 {
        return;
    }
    if m == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`matmul_slices`] with the second operand used transposed:
/// `c[m,k] = a[m,n] · bᵀ[n,k]` where `b` is stored `[k, n]` row-major.
pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    if m == 0 || k == 0 {
        return;
    }
    if n == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// Number of valid output positions along one axis for a kernel of size `k`
/// sliding with `stride` over an axis of size `extent` padded by `padding`
/// zeros on each side: `⌊(extent + 2·padding − k) / stride⌋ + 1`.
pub fn output_extent(extent: usize, k: usize, padding: usize, stride: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size and stride must be positive (k={k}, stride={stride})"
        )));
    }
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} does not fit: extent {extent} with padding {padding}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Geometry shared by the patch extractors: dimensions of a `[C, H, W]` map
/// swept by a `k × k` window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeometry> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty input map [{channels}, {height}, {width}]"
            )));
        }
        let out_h = output_extent(height, k, padding, stride)?;
        let out_w = output_extent(width, k, padding, stride)?;
        Ok(ConvGeometry {
            channels,
            height,
            width,
            k,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn locations(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }
}

/// The `k × k` neighborhood of output location `(out_r, out_c)` across all
/// channels, as a `[C, k²]` tensor. Out-of-bounds taps read zero (zero
/// padding). Taps are ordered row-major within the window, which fixes the
/// meaning of the tap index `m` used by filter-bank dumps.
pub fn extract_patch(
    map: &Tensor,
    out_r: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "extract_patch expects a [C, H, W] map, got {shape:?}"
        )));
    }
    let geom = ConvGeometry::new(shape[0], shape[1], shape[2], k, stride, padding)?;
    if out_r >= geom.out_h || out_c >= geom.out_w {
        return Err(Error::InvalidArgument(format!(
            "output location ({out_r}, {out_c}) outside [{}, {}]",
            geom.out_h, geom.out_w
        )));
    }
    let mut out = vec![0.0; geom.patch_len()];
    let data = map.data();
    let (h, w) = (geom.height as isize, geom.width as isize);
    let base_r = (out_r * stride) as isize - padding as isize;
    let base_c = (out_c * stride) as isize - padding as isize;
    for ch in 0..geom.channels {
        let plane = &data[ch * geom.height * geom.width..];
        for kr in 0..k {
            for kc in 0..k {
                let r = base_r + kr as isize;
                let c = base_c + kc as isize;
                if r >= 0 && r < h && c >= 0 && c < w {
                    out[ch * k * k + kr * k + kc] = plane[r as usize * geom.width + c as usize];
                }
            }
        }
    }
    Tensor::from_vec(&[geom.channels, k * k], out)
}

/// Unfold a `[C, H, W]` slice into the patch matrix `[C · k², out_h · out_w]`:
/// row `j = ch · k² + kr · k + kc` holds tap `(kr, kc)` of channel `ch` for
/// every output location `l = r · out_w + c` in row-major order. Zero
/// padding. The row-per-tap layout means each row is filled with contiguous
/// `out_w`-long copies from the source plane, and a convolution becomes a
/// single plain GEMM against this matrix.
pub fn im2col(data: &[f64], geom: &ConvGeometry, cols: &mut [f64]) {
    let (k, stride, padding) = (geom.k, geom.stride, geom.padding);
    let (h, w) = (geom.height, geom.width);
    let locations = geom.locations();
    debug_assert_eq!(data.len(), geom.channels * h * w);
    debug_assert_eq!(cols.len(), geom.patch_len() * locations);
    cols.fill(0.0);
    for ch in 0..geom.channels {
        let plane = &data[ch * h * w..][..h * w];
        for kr in 0..k {
            for kc in 0..k {
                let row = &mut cols[(ch * k * k + kr * k + kc) * locations..][..locations];
                for out_r in 0..geom.out_h {
                    let r = (out_r * stride + kr) as isize - padding as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    let src_row = &plane[r as usize * w..][..w];
                    let dst_row = &mut row[out_r * geom.out_w..][..geom.out_w];
                    if stride == 1 {
                        // Source column for output c is c + kc - padding: one
                        // shifted contiguous span, clipped at the borders.
                        let base_c = kc as isize - padding as isize;
                        let lo = (-base_c).max(0) as usize;
                        let hi = (w as isize - base_c).clamp(0, geom.out_w as isize) as usize;
                        if lo < hi {
                            let src0 = (lo as isize + base_c) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[src0..src0 + (hi - lo)]);
                        }
                    } else {
                        for (out_c, dst) in dst_row.iter_mut().enumerate() {
                            let c = (out_c * stride + kc) as isize - padding as isize;
                            if c >= 0 && c < w as isize {
                                *dst = src_row[c as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch-matrix rows back onto a
/// `[C, H, W]` map. `⟨im2col(x), cols⟩ = ⟨x, col2im(cols)⟩` holds exactly,
/// which is what makes convolution gradients with respect to the input
/// correct.
pub fn col2im(cols: &[f64], geom: &ConvGeometry, data: &mut [f64]) {
    let (k, stride, padding) = (geom.k, geom.stride, geom.padding);
    let (h, w) = (geom.height, geom.width);
    let locations = geom.locations();
    debug_assert_eq!(data.len(), geom.channels * h * w);
    debug_assert_eq!(cols.len(), geom.patch_len() * locations);
    data.fill(0.0);
    for ch in 0..geom.channels {
        let plane = &mut data[ch * h * w..][..h * w];
        for kr in 0..k {
            for kc in 0..k {
                let row = &cols[(ch * k * k + kr * k + kc) * locations..][..locations];
                for out_r in 0..geom.out_h {
                    let r = (out_r * stride + kr) as isize - padding as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[r as usize * w..][..w];
                    let src_row = &row[out_r * geom.out_w..][..geom.out_w];
                    if stride == 1 {
                        let base_c = kc as isize - padding as isize;
                        let lo = (-base_c).max(0) as usize;
                        let hi = (w as isize - base_c).clamp(0, geom.out_w as isize) as usize;
                        for i in lo..hi {
                            dst_row[(i as isize + base_c) as usize] += src_row[i];
                        }
                    } else {
                        for (out_c, &v) in src_row.iter().enumerate() {
                            let c = (out_c * stride + kc) as isize - padding as isize;
                            if c >= 0 && c < w as isize {
                                dst_row[c as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
