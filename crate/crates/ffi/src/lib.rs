//! C interface to the point cloud classifier.
//!
//! Every function returns a [`PdgmStatus`]; on failure a message is kept
//! per thread and can be read with [`pdgm_last_error`]. Models are opaque
//! heap objects owned by the caller and released with
//! [`pdgm_model_free`]. Points are passed as `n × 3` row-major doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pdgm_core::data::{normalize, Point};
use pdgm_core::dds::{cds_order_k, ids_order_k};
use pdgm_core::model::{Model, ModelConfig};
use pdgm_core::ssm::Scale;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdgmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Model = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct PdgmModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: PdgmStatus, msg: impl Into<String>) -> PdgmStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> PdgmStatus) -> PdgmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == PdgmStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(PdgmStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PdgmStatus> {
    if p.is_null() {
        return Err(fail(PdgmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(PdgmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const PdgmModel) -> Result<&'a Model, PdgmStatus> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| fail(PdgmStatus::NullPointer, "model is null"))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pdgm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pdgm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a freshly initialised model. `scale` is "tiny", "small" or
/// "base".
///
/// # Safety
/// `scale` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdgm_model_new(
    scale: *const c_char,
    num_classes: usize,
    seed: u64,
    out: *mut *mut PdgmModel,
) -> PdgmStatus {
    guard(|| {
        let name = tri!(str_arg(scale, "scale"));
        if out.is_null() {
            return fail(PdgmStatus::NullPointer, "out is null");
        }
        let Some(scale) = Scale::parse(name) else {
            return fail(PdgmStatus::InvalidArgument, format!("unknown scale `{name}`"));
        };
        if num_classes < 2 {
            return fail(PdgmStatus::InvalidArgument, "need at least 2 classes");
        }
        match Model::new(ModelConfig::new(scale, num_classes), seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PdgmModel { inner }));
                PdgmStatus::Ok
            }
            Err(e) => fail(PdgmStatus::Model, e.to_string()),
        }
    })
}

/// Loads a checkpoint written by the library or the `pdgm` tool.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdgm_model_load(path: *const c_char, out: *mut *mut PdgmModel) -> PdgmStatus {
    guard(|| {
        let path = tri!(str_arg(path, "path"));
        if out.is_null() {
            return fail(PdgmStatus::NullPointer, "out is null");
        }
        match Model::load(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PdgmModel { inner }));
                PdgmStatus::Ok
            }
            Err(e) => fail(PdgmStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn pdgm_model_save(model: *const PdgmModel, path: *const c_char) -> PdgmStatus {
    guard(|| {
        let m = tri!(model_ref(model));
        let path = tri!(str_arg(path, "path"));
        match m.save(Path::new(path)) {
            Ok(()) => PdgmStatus::Ok,
            Err(e) => fail(PdgmStatus::Io, e.to_string()),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pdgm_model_free(model: *mut PdgmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn pdgm_model_num_classes(model: *const PdgmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.num_classes)
}

/// Total number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn pdgm_model_num_params(model: *const PdgmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_params())
}

/// Classifies one cloud in inference mode. The cloud is normalized first.
/// Writes `num_classes` logits and the arg-max class.
///
/// # Safety
/// `points` must hold `3 * num_points` doubles and `logits` `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn pdgm_model_classify(
    model: *const PdgmModel,
    points: *const f64,
    num_points: usize,
    logits: *mut f64,
    logits_len: usize,
    class_out: *mut usize,
) -> PdgmStatus {
    guard(|| {
        let m = tri!(model_ref(model));
        if points.is_null() || logits.is_null() || class_out.is_null() {
            return fail(PdgmStatus::NullPointer, "points, logits and class_out must be non-null");
        }
        let classes = m.config.num_classes;
        if logits_len < classes {
            return fail(PdgmStatus::BufferTooSmall, format!("logits needs {classes} entries, got {logits_len}"));
        }
        let raw = std::slice::from_raw_parts(points, num_points * 3);
        let cloud: Vec<Point> = raw.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        let normed = match normalize(&cloud, "ffi") {
            Ok(p) => p,
            Err(e) => return fail(PdgmStatus::InvalidArgument, e.to_string()),
        };
        let out = match m.infer(&normed) {
            Ok(o) => o,
            Err(e) => return fail(PdgmStatus::Model, e.to_string()),
        };
        let z = out.logits.data();
        ptr::copy_nonoverlapping(z.as_ptr(), logits, classes);
        *class_out = z.iter().enumerate().fold(0, |b, (i, &v)| if v > z[b] { i } else { b });
        PdgmStatus::Ok
    })
}

/// Centers a cloud at the origin and scales it into the unit sphere, in
/// place.
///
/// # Safety
/// `points` must hold `3 * num_points` doubles.
#[no_mangle]
pub unsafe extern "C" fn pdgm_normalize(points: *mut f64, num_points: usize) -> PdgmStatus {
    guard(|| {
        if points.is_null() {
            return fail(PdgmStatus::NullPointer, "points is null");
        }
        let raw = std::slice::from_raw_parts_mut(points, num_points * 3);
        let cloud: Vec<Point> = raw.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        match normalize(&cloud, "ffi") {
            Ok(n) => {
                for (dst, p) in raw.chunks_exact_mut(3).zip(n) {
                    dst.copy_from_slice(&p);
                }
                PdgmStatus::Ok
            }
            Err(e) => fail(PdgmStatus::InvalidArgument, e.to_string()),
        }
    })
}

unsafe fn write_order(perm: &[usize], out: *mut usize, out_len: usize) -> PdgmStatus {
    if out.is_null() {
        return fail(PdgmStatus::NullPointer, "out is null");
    }
    if out_len < perm.len() {
        return fail(PdgmStatus::BufferTooSmall, format!("order needs {} entries, got {out_len}", perm.len()));
    }
    ptr::copy_nonoverlapping(perm.as_ptr(), out, perm.len());
    PdgmStatus::Ok
}

/// Intra-block scan order over `blocks` concatenated length-`len` blocks.
///
/// # Safety
/// `out` must hold `out_len` entries, at least `len * blocks`.
#[no_mangle]
pub unsafe extern "C" fn pdgm_ids_order(len: usize, blocks: usize, out: *mut usize, out_len: usize) -> PdgmStatus {
    guard(|| write_order(&ids_order_k(len, blocks).perm, out, out_len))
}

/// Cross-block scan order: position `t` of every block, then `t + 1`.
///
/// # Safety
/// `out` must hold `out_len` entries, at least `len * blocks`.
#[no_mangle]
pub unsafe extern "C" fn pdgm_cds_order(len: usize, blocks: usize, out: *mut usize, out_len: usize) -> PdgmStatus {
    guard(|| write_order(&cds_order_k(len, blocks).perm, out, out_len))
}
