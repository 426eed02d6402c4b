//! Exercises the C ABI exactly as a foreign caller would: raw pointers,
//! status codes, and the thread-local error message.

use cure_core::checkpoint;
use cure_core::config::build_network;
use cure_core::{InitScheme, Tensor};
use cure_ffi::{
    cure_certify_l2, cure_certify_linf, cure_forward, cure_last_error_message,
    cure_network_free, cure_network_input_len, cure_network_load, cure_network_num_classes,
    cure_network_save, cure_version, CureNetwork, CureStatus,
};
use std::ffi::{CStr, CString};
use std::ptr;

fn sample_checkpoint(dir: &tempfile::TempDir) -> (std::path::PathBuf, cure_core::Network) {
    let net = build_network("mlp:6", &[4], 3)
        .unwrap()
        .init(InitScheme::default(), 11);
    let path = dir.path().join("net.ckpt");
    checkpoint::save_checkpoint(&net, &path).unwrap();
    (path, net)
}

fn c_path(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_non_empty() {
    let v = unsafe { CStr::from_ptr(cure_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn load_forward_save_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (path, net) = sample_checkpoint(&dir);

    let mut handle: *mut CureNetwork = ptr::null_mut();
    let status = unsafe { cure_network_load(c_path(&path).as_ptr(), &mut handle) };
    assert_eq!(status, CureStatus::Ok);
    assert!(!handle.is_null());

    let mut input_len = 0usize;
    let mut classes = 0usize;
    unsafe {
        assert_eq!(
            cure_network_input_len(handle, &mut input_len),
            CureStatus::Ok
        );
        assert_eq!(
            cure_network_num_classes(handle, &mut classes),
            CureStatus::Ok
        );
    }
    assert_eq!(input_len, 4);
    assert_eq!(classes, 3);

    let x = [0.25f64, 0.5, 0.75, 0.1];
    let mut logits = [0.0f64; 3];
    let status = unsafe { cure_forward(handle, x.as_ptr(), x.len(), logits.as_mut_ptr()) };
    assert_eq!(status, CureStatus::Ok);
    let expect = net.forward(&Tensor::from_slice(&x)).unwrap();
    for (a, b) in logits.iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let saved = dir.path().join("resaved.ckpt");
    let status = unsafe { cure_network_save(handle, c_path(&saved).as_ptr()) };
    assert_eq!(status, CureStatus::Ok);
    assert_eq!(checkpoint::load_checkpoint(&saved).unwrap(), net);

    unsafe { cure_network_free(handle) };
}

#[test]
fn certification_flags_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, net) = sample_checkpoint(&dir);
    let mut handle: *mut CureNetwork = ptr::null_mut();
    unsafe {
        assert_eq!(
            cure_network_load(c_path(&path).as_ptr(), &mut handle),
            CureStatus::Ok
        );
    }
    let x = [0.4f64, 0.3, 0.8, 0.6];
    for (y, eps) in [(0usize, 0.01f64), (1, 0.05), (2, 0.0)] {
        let mut flag = false;
        unsafe {
            assert_eq!(
                cure_certify_linf(handle, x.as_ptr(), x.len(), y, eps, &mut flag),
                CureStatus::Ok
            );
        }
        let expect = cure_core::certify::certify_linf(&net, &x, y, eps, true).unwrap();
        assert_eq!(flag, expect);

        let mut flag2 = false;
        unsafe {
            assert_eq!(
                cure_certify_l2(handle, x.as_ptr(), x.len(), y, eps, &mut flag2),
                CureStatus::Ok
            );
        }
        let expect2 = cure_core::certify::certify_l2(&net, &x, y, eps, true).unwrap();
        assert_eq!(flag2, expect2);
    }
    unsafe { cure_network_free(handle) };
}

#[test]
fn error_codes_and_messages() {
    // Null pointers.
    let mut handle: *mut CureNetwork = ptr::null_mut();
    assert_eq!(
        unsafe { cure_network_load(ptr::null(), &mut handle) },
        CureStatus::NullPointer
    );

    // Missing file -> Io.
    let missing = CString::new("/nonexistent/cure.ckpt").unwrap();
    assert_eq!(
        unsafe { cure_network_load(missing.as_ptr(), &mut handle) },
        CureStatus::Io
    );
    assert!(handle.is_null());

    // Corrupt payload -> Corrupt, with a readable message.
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = sample_checkpoint(&dir);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(
        unsafe { cure_network_load(c_path(&bad).as_ptr(), &mut handle) },
        CureStatus::Corrupt
    );
    let msg = unsafe { CStr::from_ptr(cure_last_error_message()) };
    assert!(msg.to_str().unwrap().contains("CRC"));

    // Invalid class index -> InvalidArgument.
    let (path, _) = sample_checkpoint(&dir);
    unsafe {
        assert_eq!(
            cure_network_load(c_path(&path).as_ptr(), &mut handle),
            CureStatus::Ok
        );
    }
    let x = [0.0f64; 4];
    let mut flag = false;
    assert_eq!(
        unsafe { cure_certify_linf(handle, x.as_ptr(), 4, 99, 0.1, &mut flag) },
        CureStatus::InvalidArgument
    );
    unsafe { cure_network_free(handle) };
}

#[test]
fn header_is_generated_with_expected_symbols() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cure.h");
    let text = std::fs::read_to_string(header).expect("cbindgen header exists");
    for symbol in [
        "cure_network_load",
        "cure_network_free",
        "cure_forward",
        "cure_certify_linf",
        "cure_certify_l2",
        "cure_train_run",
        "CureStatus",
    ] {
        assert!(text.contains(symbol), "missing {symbol} in cure.h");
    }
}
