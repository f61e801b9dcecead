use std::ffi::{CStr, CString};
use std::ptr;

use qmlp_ffi::*;

fn last_error() -> String {
    let p = qmlp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn qparams_and_round_trip() {
    let mut qp = QmlpQParams {
        scale: 0.0,
        zero_point: 0,
        bits: 0,
        scheme: QmlpScheme::Symmetric,
    };
    let st = unsafe { qmlp_compute_qparams(-1.0, 1.27, 8, QmlpScheme::Symmetric, &mut qp) };
    assert_eq!(st, QmlpStatus::Ok);
    assert!(qmlp_last_error().is_null());
    assert!((qp.scale - 0.01).abs() < 1e-15);
    assert_eq!(qp.zero_point, 0);

    let x = [0.5, -0.013, 1.27, 3.0];
    let mut q = [0i32; 4];
    let mut r = [0f64; 4];
    let mut fq = [0f64; 4];
    unsafe {
        assert_eq!(qmlp_quantize(&qp, x.as_ptr(), 4, q.as_mut_ptr()), QmlpStatus::Ok);
        assert_eq!(qmlp_dequantize(&qp, q.as_ptr(), 4, r.as_mut_ptr()), QmlpStatus::Ok);
        assert_eq!(qmlp_fake_quant(&qp, x.as_ptr(), 4, fq.as_mut_ptr()), QmlpStatus::Ok);
    }
    assert_eq!(q, [50, -1, 127, 127]);
    assert_eq!(r, fq);
}

#[test]
fn invalid_arguments_report_codes() {
    let mut qp = QmlpQParams {
        scale: 1.0,
        zero_point: 0,
        bits: 8,
        scheme: QmlpScheme::Symmetric,
    };
    let st = unsafe { qmlp_compute_qparams(0.0, 1.0, 1, QmlpScheme::Asymmetric, &mut qp) };
    assert_ne!(st, QmlpStatus::Ok);
    assert!(!last_error().is_empty());

    let st = unsafe { qmlp_compute_qparams(0.0, 1.0, 8, QmlpScheme::Symmetric, ptr::null_mut()) };
    assert_eq!(st, QmlpStatus::NullPointer);
    assert!(last_error().contains("out"));

    qp.scale = -1.0;
    let x = [1.0];
    let mut out = [0.0];
    let st = unsafe { qmlp_fake_quant(&qp, x.as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(st, QmlpStatus::InvalidArgument);

    qp.scale = 1.0;
    let st = unsafe { qmlp_fake_quant(&qp, ptr::null(), 1, out.as_mut_ptr()) };
    assert_eq!(st, QmlpStatus::NullPointer);
    // zero-length buffers may be null
    let st = unsafe { qmlp_fake_quant(&qp, ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(st, QmlpStatus::Ok);
}

#[test]
fn observer_lifecycle() {
    let mut obs = ptr::null_mut();
    assert_eq!(unsafe { qmlp_observer_new(QmlpObserverKind::MinMax, 0.0, &mut obs) }, QmlpStatus::Ok);
    let (mut lo, mut hi) = (0.0, 0.0);
    // no samples yet
    assert_ne!(unsafe { qmlp_observer_range(obs, &mut lo, &mut hi) }, QmlpStatus::Ok);
    let a = [0.5, -2.0, 1.0];
    let b = [3.0];
    unsafe {
        assert_eq!(qmlp_observer_observe(obs, a.as_ptr(), 3), QmlpStatus::Ok);
        assert_eq!(qmlp_observer_observe(obs, b.as_ptr(), 1), QmlpStatus::Ok);
        assert_eq!(qmlp_observer_range(obs, &mut lo, &mut hi), QmlpStatus::Ok);
        qmlp_observer_free(obs);
        qmlp_observer_free(ptr::null_mut());
    }
    assert_eq!((lo, hi), (-2.0, 3.0));

    let st = unsafe { qmlp_observer_new(QmlpObserverKind::Percentile, 1.5, &mut obs) };
    assert_eq!(st, QmlpStatus::InvalidArgument);
}

#[test]
fn model_handle_predicts_and_round_trips() {
    let cfg = CString::new("[model]\nfamily = resmlp\ndepth = 1\nchannels = 8\nchannel_hidden = 16\ngroups = 1\n").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { qmlp_model_new(cfg.as_ptr(), 3, &mut m) }, QmlpStatus::Ok);
    let (mut len, mut classes, mut params, mut flops) = (0usize, 0usize, 0u64, 0u64);
    unsafe {
        assert_eq!(qmlp_model_shape(m, &mut len, &mut classes), QmlpStatus::Ok);
        assert_eq!(qmlp_model_param_count(m, &mut params), QmlpStatus::Ok);
        assert_eq!(qmlp_model_flops(m, &mut flops), QmlpStatus::Ok);
    }
    assert_eq!((len, classes), (64, 10));
    assert!(params > 0 && flops > 0);

    let images: Vec<f64> = (0..2 * len).map(|i| (i % 7) as f64 / 7.0).collect();
    let mut logits = vec![0.0; 2 * classes];
    let st = unsafe { qmlp_model_predict(m, images.as_ptr(), 2, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, QmlpStatus::Ok);
    assert!(logits.iter().all(|v| v.is_finite()));
    let st = unsafe { qmlp_model_predict(m, images.as_ptr(), 2, logits.as_mut_ptr(), 3) };
    assert_eq!(st, QmlpStatus::Dimension);

    let dir = std::env::temp_dir().join(format!("qmlp_ffi_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = CString::new(dir.join("m.qmck").to_str().unwrap()).unwrap();
    let mut other = ptr::null_mut();
    let mut again = vec![0.0; logits.len()];
    unsafe {
        assert_eq!(qmlp_model_save(m, path.as_ptr()), QmlpStatus::Ok);
        assert_eq!(qmlp_model_new(cfg.as_ptr(), 99, &mut other), QmlpStatus::Ok);
        assert_eq!(qmlp_model_load(other, path.as_ptr()), QmlpStatus::Ok);
        assert_eq!(qmlp_model_predict(other, images.as_ptr(), 2, again.as_mut_ptr(), again.len()), QmlpStatus::Ok);
        let missing = CString::new(dir.join("none.qmck").to_str().unwrap()).unwrap();
        assert_eq!(qmlp_model_load(other, missing.as_ptr()), QmlpStatus::Io);
        qmlp_model_free(m);
        qmlp_model_free(other);
    }
    assert_eq!(logits, again);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn bad_config_text() {
    let cfg = CString::new("[model]\ndepth = many\n").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { qmlp_model_new(cfg.as_ptr(), 0, &mut m) }, QmlpStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("model.depth"));
}

#[test]
fn metrics_match_table_cells() {
    assert_eq!(qmlp_bops(11.94, 8, 8).floor(), 764.0);
    assert_eq!(qmlp_model_size_mb(30_000_000, 4).round(), 15.0);
    let v = unsafe { CStr::from_ptr(qmlp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/qmlp.h")).unwrap();
    for name in [
        "qmlp_last_error",
        "qmlp_compute_qparams",
        "qmlp_quantize",
        "qmlp_dequantize",
        "qmlp_fake_quant",
        "qmlp_observer_new",
        "qmlp_observer_free",
        "qmlp_model_new",
        "qmlp_model_predict",
        "qmlp_model_free",
        "qmlp_bops",
        "QMLP_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
