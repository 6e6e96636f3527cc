//! C ABI for the dynamic high-frequency convolution library.
//!
//! The interface follows the usual C embedding conventions: opaque handles
//! behind pointers, a status code returned from every fallible call, results
//! written through out-pointers, and a thread-local message describing the
//! most recent failure. The generated header lives at `include/dhif.h`
//! (regenerated by the build script).
//!
//! Two handle types are exposed: [`DhifOperator`] wraps a single dynamic
//! convolution layer for direct experimentation, and [`DhifDetector`] wraps
//! a full trained detector loaded from a checkpoint file written by the
//! `dhif train` command.
//!
//! Memory rules: every `*_new`/`*_load` out-pointer hands ownership to the
//! caller, who must release it with the matching `*_free`; `dhif_last_error`
//! and `dhif_version` return borrowed strings that must not be freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

use dhif_core::dhif::DhifLayer;
use dhif_core::error::Error;
use dhif_core::net::MiniDetector;
use dhif_core::ops::Activation;
use dhif_core::rng::SeededRng;
use dhif_core::tensor::{ConvGeometry, Tensor};

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhifStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// Arguments or configuration were rejected; see `dhif_last_error`.
    InvalidArgument = 2,
    /// A file exists but its contents could not be parsed.
    ParseError = 3,
    /// The operating system reported an I/O failure.
    IoError = 4,
    /// An internal invariant failed; see `dhif_last_error`.
    Internal = 5,
}

/// Opaque handle to one dynamic convolution layer.
pub struct DhifOperator {
    layer: DhifLayer,
}

/// Opaque handle to a trained detector.
pub struct DhifDetector {
    net: MiniDetector,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: DhifStatus, err: &Error) -> DhifStatus {
    let text = err.to_string();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
    status
}

fn fail_from(err: Error) -> DhifStatus {
    let status = match err {
        Error::Io { .. } => DhifStatus::IoError,
        Error::Parse { .. } => DhifStatus::ParseError,
        Error::ContractViolation(_) | Error::Diverged { .. } | Error::CheckFailed(_) => {
            DhifStatus::Internal
        }
        _ => DhifStatus::InvalidArgument,
    };
    fail(status, &err)
}

fn fail_message(status: DhifStatus, message: &str) -> DhifStatus {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message).unwrap_or_default();
    });
    status
}

/// Message describing the most recent failure on the calling thread, as a
/// NUL-terminated UTF-8 string. Empty until a call fails. The pointer is
/// borrowed: it stays valid until the next failing call on this thread and
/// must not be freed.
#[no_mangle]
pub extern "C" fn dhif_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string. Must not be freed.
#[no_mangle]
pub extern "C" fn dhif_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn parse_activation(name: *const c_char) -> Result<Activation, DhifStatus> {
    if name.is_null() {
        return Err(fail_message(
            DhifStatus::NullArgument,
            "nonlinearity name is NULL",
        ));
    }
    let text = CStr::from_ptr(name).to_str().map_err(|_| {
        fail_message(
            DhifStatus::InvalidArgument,
            "nonlinearity name is not valid UTF-8",
        )
    })?;
    Activation::parse(text).map_err(fail_from)
}

/// Create a dynamic convolution layer. The plain-convolution weights are
/// Kaiming-initialized from `seed`; the filter generator starts at zero, so
/// a fresh operator computes exactly the standard convolution until
/// `dhif_operator_randomize_generator` (or training in the core library)
/// gives it nonzero weights. `nonlinearity` is one of "tanh", "sigmoid",
/// "relu", "leaky-relu", "gelu", "none".
///
/// # Safety
/// `nonlinearity` must be NULL or point to a NUL-terminated string; `out`
/// must point to writable storage for one pointer. On success `*out` owns
/// the handle and must be released with `dhif_operator_free`.
#[no_mangle]
pub unsafe extern "C" fn dhif_operator_new(
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    stride: usize,
    padding: usize,
    nonlinearity: *const c_char,
    seed: u64,
    out: *mut *mut DhifOperator,
) -> DhifStatus {
    if out.is_null() {
        return fail_message(DhifStatus::NullArgument, "out handle pointer is NULL");
    }
    let activation = match parse_activation(nonlinearity) {
        Ok(a) => a,
        Err(status) => return status,
    };
    let mut layer =
        match DhifLayer::new(in_channels, out_channels, kernel_size, stride, padding, activation) {
            Ok(l) => l,
            Err(e) => return fail_from(e),
        };
    layer.init_kaiming(&mut SeededRng::new(seed));
    *out = Box::into_raw(Box::new(DhifOperator { layer }));
    DhifStatus::Ok
}

/// Release an operator handle. NULL is ignored.
///
/// # Safety
/// `op` must be NULL or a pointer obtained from `dhif_operator_new` that has
/// not been freed already.
#[no_mangle]
pub unsafe extern "C" fn dhif_operator_free(op: *mut DhifOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Fill the filter generator (projection and bias) with centered Gaussian
/// values of the given standard deviation, drawn from `seed`. With a zero
/// scale this restores the plain-convolution behavior.
///
/// # Safety
/// `op` must be a live pointer from `dhif_operator_new`.
#[no_mangle]
pub unsafe extern "C" fn dhif_operator_randomize_generator(
    op: *mut DhifOperator,
    scale: f64,
    seed: u64,
) -> DhifStatus {
    let Some(op) = op.as_mut() else {
        return fail_message(DhifStatus::NullArgument, "operator handle is NULL");
    };
    if !scale.is_finite() || scale < 0.0 {
        return fail_message(
            DhifStatus::InvalidArgument,
            "generator scale must be finite and non-negative",
        );
    }
    let mut rng = SeededRng::new(seed);
    let p = rng.fill_normal(op.layer.projection.len());
    for (dst, v) in op.layer.projection.data_mut().iter_mut().zip(p) {
        *dst = scale * v;
    }
    let b = rng.fill_normal(op.layer.proj_bias.len());
    for (dst, v) in op.layer.proj_bias.data_mut().iter_mut().zip(b) {
        *dst = scale * v;
    }
    DhifStatus::Ok
}

/// Output extents for a given input size: writes the number of output
/// channels, rows, and columns the operator produces for an
/// `in_channels × height × width` input.
///
/// # Safety
/// `op` must be a live operator handle; the three out-pointers must each be
/// NULL or point to writable `usize` storage (NULL entries are skipped).
#[no_mangle]
pub unsafe extern "C" fn dhif_operator_output_dims(
    op: *const DhifOperator,
    height: usize,
    width: usize,
    out_channels: *mut usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> DhifStatus {
    let Some(op) = op.as_ref() else {
        return fail_message(DhifStatus::NullArgument, "operator handle is NULL");
    };
    let geom = match ConvGeometry::new(
        op.layer.in_ch,
        height,
        width,
        op.layer.k,
        op.layer.stride,
        op.layer.padding,
    ) {
        Ok(g) => g,
        Err(e) => return fail_from(e),
    };
    if !out_channels.is_null() {
        *out_channels = op.layer.out_ch;
    }
    if !out_height.is_null() {
        *out_height = geom.out_h;
    }
    if !out_width.is_null() {
        *out_width = geom.out_w;
    }
    DhifStatus::Ok
}

/// Run the operator on one image. `input` holds `in_channels × height ×
/// width` values in channel-major order; `output` receives `out_channels ×
/// out_height × out_width` values (sizes from `dhif_operator_output_dims`).
///
/// # Safety
/// `op` must be a live operator handle, `input` must point to
/// `in_channels·height·width` readable doubles, and `output` to
/// `output_len` writable doubles. The buffers must not overlap.
#[no_mangle]
pub unsafe extern "C" fn dhif_operator_forward(
    op: *const DhifOperator,
    input: *const f64,
    height: usize,
    width: usize,
    output: *mut f64,
    output_len: usize,
) -> DhifStatus {
    let Some(op) = op.as_ref() else {
        return fail_message(DhifStatus::NullArgument, "operator handle is NULL");
    };
    if input.is_null() || output.is_null() {
        return fail_message(DhifStatus::NullArgument, "input or output buffer is NULL");
    }
    let in_len = op.layer.in_ch * height * width;
    let x_vals = std::slice::from_raw_parts(input, in_len).to_vec();
    let x = match Tensor::from_vec(&[1, op.layer.in_ch, height, width], x_vals) {
        Ok(t) => t,
        Err(e) => return fail_from(e),
    };
    let (y, _) = match op.layer.forward(&x) {
        Ok(pair) => pair,
        Err(e) => return fail_from(e),
    };
    if y.len() != output_len {
        return fail_message(
            DhifStatus::InvalidArgument,
            &format!(
                "output buffer holds {output_len} values, the operator produces {}",
                y.len()
            ),
        );
    }
    std::ptr::copy_nonoverlapping(y.data().as_ptr(), output, y.len());
    DhifStatus::Ok
}

/// Total trainable parameters of the operator (convolution weights plus the
/// filter generator).
///
/// # Safety
/// `op` must be a live operator handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dhif_operator_param_count(
    op: *const DhifOperator,
    out: *mut usize,
) -> DhifStatus {
    let Some(op) = op.as_ref() else {
        return fail_message(DhifStatus::NullArgument, "operator handle is NULL");
    };
    if out.is_null() {
        return fail_message(DhifStatus::NullArgument, "out pointer is NULL");
    }
    *out = op.layer.param_count();
    DhifStatus::Ok
}

/// Load a detector from a checkpoint file written by `dhif train`.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer. On success `*out` owns the handle and must be
/// released with `dhif_detector_free`.
#[no_mangle]
pub unsafe extern "C" fn dhif_detector_load(
    path: *const c_char,
    out: *mut *mut DhifDetector,
) -> DhifStatus {
    if path.is_null() || out.is_null() {
        return fail_message(DhifStatus::NullArgument, "path or out pointer is NULL");
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail_message(DhifStatus::InvalidArgument, "path is not valid UTF-8");
    };
    match dhif_core::checkpoint::load_detector(path) {
        Ok(net) => {
            *out = Box::into_raw(Box::new(DhifDetector { net }));
            DhifStatus::Ok
        }
        Err(e) => fail_from(e),
    }
}

/// Release a detector handle. NULL is ignored.
///
/// # Safety
/// `det` must be NULL or a pointer obtained from `dhif_detector_load` that
/// has not been freed already.
#[no_mangle]
pub unsafe extern "C" fn dhif_detector_free(det: *mut DhifDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Number of input channels the detector expects.
///
/// # Safety
/// `det` must be a live detector handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dhif_detector_input_channels(
    det: *const DhifDetector,
    out: *mut usize,
) -> DhifStatus {
    let Some(det) = det.as_ref() else {
        return fail_message(DhifStatus::NullArgument, "detector handle is NULL");
    };
    if out.is_null() {
        return fail_message(DhifStatus::NullArgument, "out pointer is NULL");
    }
    *out = det.net.config().in_ch;
    DhifStatus::Ok
}

/// Trainable parameter count and the share contributed by the dynamic
/// layers' filter generators. Either out-pointer may be NULL to skip it.
///
/// # Safety
/// `det` must be a live detector handle; non-NULL out-pointers must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dhif_detector_param_counts(
    det: *const DhifDetector,
    total: *mut usize,
    extra: *mut usize,
) -> DhifStatus {
    let Some(det) = det.as_ref() else {
        return fail_message(DhifStatus::NullArgument, "detector handle is NULL");
    };
    if !total.is_null() {
        *total = det.net.param_count();
    }
    if !extra.is_null() {
        *extra = det.net.extra_param_count();
    }
    DhifStatus::Ok
}

/// Run inference on one image and write the per-pixel target probabilities.
/// `input` holds `channels × height × width` values in channel-major order
/// with `channels` equal to the detector's input channels; `output`
/// receives `height × width` probabilities in row-major order.
///
/// # Safety
/// `det` must be a live detector handle, `input` must point to
/// `channels·height·width` readable doubles, and `output` to
/// `height·width` writable doubles. The buffers must not overlap.
#[no_mangle]
pub unsafe extern "C" fn dhif_detector_predict(
    det: *mut DhifDetector,
    input: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    output: *mut f64,
) -> DhifStatus {
    let Some(det) = det.as_mut() else {
        return fail_message(DhifStatus::NullArgument, "detector handle is NULL");
    };
    if input.is_null() || output.is_null() {
        return fail_message(DhifStatus::NullArgument, "input or output buffer is NULL");
    }
    let expected = det.net.config().in_ch;
    if channels != expected {
        return fail_message(
            DhifStatus::InvalidArgument,
            &format!("detector expects {expected} input channel(s), got {channels}"),
        );
    }
    let x_vals = std::slice::from_raw_parts(input, channels * height * width).to_vec();
    let x = match Tensor::from_vec(&[1, channels, height, width], x_vals) {
        Ok(t) => t,
        Err(e) => return fail_from(e),
    };
    match det.net.predict(&x) {
        Ok(pred) => {
            std::ptr::copy_nonoverlapping(pred.data().as_ptr(), output, height * width);
            DhifStatus::Ok
        }
        Err(e) => fail_from(e),
    }
}
