//! C ABI for the cure library.
//!
//! Handles are opaque pointers owned by the library; every constructor has
//! a matching `_free`. Functions return [`CureStatus`] codes; on failure a
//! thread-local message is readable via [`cure_last_error_message`] until
//! the next call on the same thread.

use cure_core::certify;
use cure_core::checkpoint;
use cure_core::error::CureError;
use cure_core::tensor::Tensor;
use cure_core::Network;
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CureStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments failed validation (shape, range, class index, config).
    InvalidArgument = 2,
    /// Filesystem error.
    Io = 3,
    /// Checkpoint or dataset failed integrity checks (magic, CRC,
    /// truncation, header).
    Corrupt = 4,
    /// Internal numerical or training failure.
    Runtime = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &CureError) -> CureStatus {
    match err {
        CureError::BadMagic
        | CureError::VersionMismatch(_)
        | CureError::CrcMismatch { .. }
        | CureError::Truncated(_)
        | CureError::HeaderParse(_)
        | CureError::IdxMagic { .. } => CureStatus::Corrupt,
        CureError::Io(_) => CureStatus::Io,
        CureError::ShapeMismatch { .. }
        | CureError::InvalidClass { .. }
        | CureError::DimensionMismatch(_)
        | CureError::CountMismatch { .. }
        | CureError::Config(_)
        | CureError::ArchitectureMismatch(_)
        | CureError::UnsupportedStructure(_) => CureStatus::InvalidArgument,
        _ => CureStatus::Runtime,
    }
}

fn fail(err: &CureError) -> CureStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Opaque network handle.
pub struct CureNetwork {
    inner: Network,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cure_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last error on this thread. Valid until the next failing
/// call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn cure_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn path_from(ptr: *const c_char) -> Result<String, CureStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(CureStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(CureStatus::InvalidArgument)
        }
    }
}

/// Load a checkpoint into a new network handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// memory for one pointer. On success `*out` owns the handle and must be
/// released with [`cure_network_free`].
#[no_mangle]
pub unsafe extern "C" fn cure_network_load(
    path: *const c_char,
    out: *mut *mut CureNetwork,
) -> CureStatus {
    if out.is_null() {
        set_error("null output pointer");
        return CureStatus::NullPointer;
    }
    *out = ptr::null_mut();
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match checkpoint::load_checkpoint(Path::new(&path)) {
        Ok(net) => {
            *out = Box::into_raw(Box::new(CureNetwork { inner: net }));
            CureStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Serialize a network handle to a checkpoint file (double precision).
///
/// # Safety
/// `net` must be a live handle from this library; `path` a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn cure_network_save(
    net: *const CureNetwork,
    path: *const c_char,
) -> CureStatus {
    let Some(net) = net.as_ref() else {
        set_error("null network handle");
        return CureStatus::NullPointer;
    };
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match checkpoint::save_checkpoint(&net.inner, Path::new(&path)) {
        Ok(()) => CureStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Release a network handle. Null is a no-op.
///
/// # Safety
/// `net` must be a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cure_network_free(net: *mut CureNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Flat input length the network expects.
///
/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cure_network_input_len(
    net: *const CureNetwork,
    out: *mut size_t,
) -> CureStatus {
    let (Some(net), false) = (net.as_ref(), out.is_null()) else {
        set_error("null pointer");
        return CureStatus::NullPointer;
    };
    *out = net.inner.input_len();
    CureStatus::Ok
}

/// Number of classes of the network head.
///
/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cure_network_num_classes(
    net: *const CureNetwork,
    out: *mut size_t,
) -> CureStatus {
    let (Some(net), false) = (net.as_ref(), out.is_null()) else {
        set_error("null pointer");
        return CureStatus::NullPointer;
    };
    *out = net.inner.num_classes();
    CureStatus::Ok
}

/// Forward pass: writes `num_classes` logits.
///
/// # Safety
/// `x` must point to `x_len` doubles and `logits_out` to `num_classes`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cure_forward(
    net: *const CureNetwork,
    x: *const f64,
    x_len: size_t,
    logits_out: *mut f64,
) -> CureStatus {
    let Some(net) = net.as_ref() else {
        set_error("null network handle");
        return CureStatus::NullPointer;
    };
    if x.is_null() || logits_out.is_null() {
        set_error("null buffer");
        return CureStatus::NullPointer;
    }
    let input = std::slice::from_raw_parts(x, x_len);
    match net.inner.forward(&Tensor::from_slice(input)) {
        Ok(logits) => {
            let out = std::slice::from_raw_parts_mut(logits_out, net.inner.num_classes());
            out.copy_from_slice(logits.data());
            CureStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

unsafe fn certify_common(
    net: *const CureNetwork,
    x: *const f64,
    x_len: size_t,
    label: size_t,
    eps: f64,
    out: *mut bool,
    f: impl Fn(&Network, &[f64], usize, f64) -> cure_core::Result<bool>,
) -> CureStatus {
    let Some(net) = net.as_ref() else {
        set_error("null network handle");
        return CureStatus::NullPointer;
    };
    if x.is_null() || out.is_null() {
        set_error("null buffer");
        return CureStatus::NullPointer;
    }
    if eps < 0.0 || !eps.is_finite() {
        set_error("epsilon must be finite and nonnegative");
        return CureStatus::InvalidArgument;
    }
    let input = std::slice::from_raw_parts(x, x_len);
    match f(&net.inner, input, label, eps) {
        Ok(flag) => {
            *out = flag;
            CureStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Sound l-inf robustness certificate over `clamp(x +- eps, 0, 1)`.
///
/// # Safety
/// Pointer arguments as in [`cure_forward`]; `out` receives the flag.
#[no_mangle]
pub unsafe extern "C" fn cure_certify_linf(
    net: *const CureNetwork,
    x: *const f64,
    x_len: size_t,
    label: size_t,
    eps: f64,
    out: *mut bool,
) -> CureStatus {
    certify_common(net, x, x_len, label, eps, out, |n, x, y, e| {
        certify::certify_linf(n, x, y, e, true)
    })
}

/// Sound (incomplete) l-2 robustness certificate over the eps ball
/// intersected with the unit hypercube.
///
/// # Safety
/// Pointer arguments as in [`cure_forward`]; `out` receives the flag.
#[no_mangle]
pub unsafe extern "C" fn cure_certify_l2(
    net: *const CureNetwork,
    x: *const f64,
    x_len: size_t,
    label: size_t,
    eps: f64,
    out: *mut bool,
) -> CureStatus {
    certify_common(net, x, x_len, label, eps, out, |n, x, y, e| {
        certify::certify_l2(n, x, y, e, true)
    })
}

/// Run a full training job from a config file, writing the run directory
/// (checkpoints, logs, manifest, eval report). Equivalent to
/// `cure train --config <path> --out <out_dir>`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cure_train_run(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> CureStatus {
    let config = match path_from(config_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let out = match path_from(out_dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let argv = vec![
        "cure".to_string(),
        "train".to_string(),
        "--config".to_string(),
        config,
        "--out".to_string(),
        out,
    ];
    match cure_core::cli::cli_main(argv) {
        0 => CureStatus::Ok,
        1 => {
            set_error("usage error");
            CureStatus::InvalidArgument
        }
        _ => {
            set_error("training run failed; see stderr");
            CureStatus::Runtime
        }
    }
}
