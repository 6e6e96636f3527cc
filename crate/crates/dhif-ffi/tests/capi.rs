//! Exercises the C ABI from Rust: handles, buffers, status codes, and
//! agreement with the core library the bindings wrap.

use std::ffi::{CStr, CString};

use dhif_core::checkpoint::save_detector;
use dhif_core::dhif::DhifLayer;
use dhif_core::net::{MiniDetector, NetConfig};
use dhif_core::ops::Activation;
use dhif_core::rng::SeededRng;
use dhif_core::tensor::Tensor;
use dhif_ffi::*;

#[test]
fn operator_matches_the_core_layer() {
    unsafe {
        let name = CString::new("tanh").unwrap();
        let mut op: *mut DhifOperator = std::ptr::null_mut();
        assert_eq!(
            dhif_operator_new(2, 3, 3, 1, 1, name.as_ptr(), 99, &mut op),
            DhifStatus::Ok
        );
        assert_eq!(dhif_operator_randomize_generator(op, 0.5, 7), DhifStatus::Ok);

        // The same construction by hand through the core library.
        let mut layer = DhifLayer::new(2, 3, 3, 1, 1, Activation::Tanh).unwrap();
        layer.init_kaiming(&mut SeededRng::new(99));
        let mut gen_rng = SeededRng::new(7);
        let p = gen_rng.fill_normal(layer.projection.len());
        for (dst, v) in layer.projection.data_mut().iter_mut().zip(p) {
            *dst = 0.5 * v;
        }
        let b = gen_rng.fill_normal(layer.proj_bias.len());
        for (dst, v) in layer.proj_bias.data_mut().iter_mut().zip(b) {
            *dst = 0.5 * v;
        }

        let (mut oc, mut oh, mut ow) = (0usize, 0usize, 0usize);
        assert_eq!(
            dhif_operator_output_dims(op, 6, 5, &mut oc, &mut oh, &mut ow),
            DhifStatus::Ok
        );
        assert_eq!((oc, oh, ow), (3, 6, 5));

        let mut count = 0usize;
        assert_eq!(dhif_operator_param_count(op, &mut count), DhifStatus::Ok);
        assert_eq!(count, layer.param_count());

        let x = SeededRng::new(8).fill_normal(2 * 6 * 5);
        let mut y = vec![0.0; oc * oh * ow];
        assert_eq!(
            dhif_operator_forward(op, x.as_ptr(), 6, 5, y.as_mut_ptr(), y.len()),
            DhifStatus::Ok
        );
        let xt = Tensor::from_vec(&[1, 2, 6, 5], x).unwrap();
        let (expected, _) = layer.forward(&xt).unwrap();
        assert_eq!(y, expected.data(), "C surface and core layer disagree");

        // A short output buffer is rejected, not overrun.
        let mut tiny = vec![0.0; 4];
        let xt_flat = xt.data().to_vec();
        assert_eq!(
            dhif_operator_forward(op, xt_flat.as_ptr(), 6, 5, tiny.as_mut_ptr(), tiny.len()),
            DhifStatus::InvalidArgument
        );

        dhif_operator_free(op);
    }
}

#[test]
fn detector_round_trips_through_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.txt");
    let mut net = MiniDetector::new(NetConfig {
        channels: vec![2, 4],
        dhif_levels: [2].into_iter().collect(),
        ..NetConfig::default()
    })
    .unwrap();
    net.init_kaiming(&mut SeededRng::new(17));
    save_detector(&net, &path).unwrap();

    unsafe {
        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        let mut det: *mut DhifDetector = std::ptr::null_mut();
        assert_eq!(dhif_detector_load(c_path.as_ptr(), &mut det), DhifStatus::Ok);

        let mut in_ch = 0usize;
        assert_eq!(dhif_detector_input_channels(det, &mut in_ch), DhifStatus::Ok);
        assert_eq!(in_ch, 1);

        let (mut total, mut extra) = (0usize, 0usize);
        assert_eq!(
            dhif_detector_param_counts(det, &mut total, &mut extra),
            DhifStatus::Ok
        );
        assert_eq!(total, net.param_count());
        assert_eq!(extra, net.extra_param_count());

        let x = SeededRng::new(18).fill_uniform(16 * 16);
        let mut probs = vec![0.0; 16 * 16];
        assert_eq!(
            dhif_detector_predict(det, x.as_ptr(), 1, 16, 16, probs.as_mut_ptr()),
            DhifStatus::Ok
        );
        let xt = Tensor::from_vec(&[1, 1, 16, 16], x).unwrap();
        let expected = net.predict(&xt).unwrap();
        assert_eq!(probs, expected.data());
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

        // Wrong channel count is diagnosed by name.
        let status = dhif_detector_predict(det, probs.as_ptr(), 3, 16, 16, probs.as_mut_ptr());
        assert_eq!(status, DhifStatus::InvalidArgument);
        let msg = CStr::from_ptr(dhif_last_error()).to_str().unwrap().to_string();
        assert!(msg.contains("1 input channel"), "{msg}");

        dhif_detector_free(det);
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    unsafe {
        let c_path = CString::new("/nonexistent/ckpt.txt").unwrap();
        let mut det: *mut DhifDetector = std::ptr::null_mut();
        assert_eq!(dhif_detector_load(c_path.as_ptr(), &mut det), DhifStatus::IoError);
        assert!(det.is_null());
        let msg = CStr::from_ptr(dhif_last_error()).to_str().unwrap().to_string();
        assert!(msg.contains("/nonexistent/ckpt.txt"), "{msg}");
    }
}

#[test]
fn generated_header_declares_the_surface() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("dhif.h");
    let text = std::fs::read_to_string(header).expect("build script generates include/dhif.h");
    for symbol in [
        "DhifStatus",
        "dhif_operator_new",
        "dhif_operator_forward",
        "dhif_detector_load",
        "dhif_detector_predict",
        "dhif_last_error",
        "DHIF_STATUS_OK",
    ] {
        assert!(text.contains(symbol), "header lacks {symbol}");
    }
}
