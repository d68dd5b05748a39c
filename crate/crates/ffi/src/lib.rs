//! C ABI for loading trained ensembles and using the fusion and AUC kernels.
//!
//! Every function returns an [`MldeStatus`]. On failure a description of the
//! error is kept per thread and can be copied out with [`mlde_last_error`].
//! Models are opaque handles created by [`mlde_model_load`] and released with
//! [`mlde_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use mlde::dataset::DiagnosisClass;
use mlde::evaluation::{auc, AucError, ScoredSet};
use mlde::fusion::{fuse, fuse_gradients, BranchProbabilities, FusionError, FusionParameters, BRANCHES};
use mlde::imaging::ImageTensor;
use mlde::training::{load_checkpoint, CheckpointError, TrainError, TrainedModel};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MldeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checksum = 4,
    UndefinedAuc = 5,
    NonFinite = 6,
    Internal = 7,
}

/// A trained one-vs-rest ensemble.
pub struct MldeModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: MldeStatus, message: impl Into<String>) -> MldeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> MldeStatus) -> MldeStatus {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MldeStatus::Internal, "internal panic"),
    }
}

fn fusion_status(e: FusionError) -> MldeStatus {
    let status = match e {
        FusionError::NonFinite(_) => MldeStatus::NonFinite,
        FusionError::OutOfRange { .. } => MldeStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

unsafe fn read4(ptr: *const f64) -> [f64; BRANCHES] {
    let mut out = [0.0; BRANCHES];
    std::ptr::copy_nonoverlapping(ptr, out.as_mut_ptr(), BRANCHES);
    out
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mlde_model_load(path: *const c_char, out: *mut *mut MldeModel) -> MldeStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(MldeStatus::NullPointer, "null argument");
        }
        *out = std::ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(MldeStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match load_checkpoint(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MldeModel { inner }));
                MldeStatus::Ok
            }
            Err(e @ CheckpointError::Io { .. }) => fail(MldeStatus::Io, e.to_string()),
            Err(e @ (CheckpointError::Checksum | CheckpointError::BadMagic)) => {
                fail(MldeStatus::Checksum, e.to_string())
            }
            Err(e) => fail(MldeStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`mlde_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mlde_model_free(model: *mut MldeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Canonical index (0 = MEL ... 6 = VASC) of the model's target class.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlde_model_target(model: *const MldeModel, out_class: *mut u32) -> MldeStatus {
    guard(|| {
        if model.is_null() || out_class.is_null() {
            return fail(MldeStatus::NullPointer, "null argument");
        }
        *out_class = (*model).inner.target.index() as u32;
        MldeStatus::Ok
    })
}

/// Writes the four normalized fusion weights.
///
/// # Safety
/// `out_weights` must point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mlde_model_fusion_weights(model: *const MldeModel, out_weights: *mut f64) -> MldeStatus {
    guard(|| {
        if model.is_null() || out_weights.is_null() {
            return fail(MldeStatus::NullPointer, "null argument");
        }
        let w = (*model).inner.fusion_weights();
        std::ptr::copy_nonoverlapping(w.as_ptr(), out_weights, BRANCHES);
        MldeStatus::Ok
    })
}

/// Scores one interleaved RGB8 image of `height * width * 3` bytes.
/// `out_branches` may be null; otherwise it receives the 4 branch probabilities.
///
/// # Safety
/// `pixels` must hold `height * width * 3` bytes; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlde_model_predict_rgb8(
    model: *const MldeModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    out_fused: *mut f64,
    out_branches: *mut f64,
) -> MldeStatus {
    guard(|| {
        if model.is_null() || pixels.is_null() || out_fused.is_null() {
            return fail(MldeStatus::NullPointer, "null argument");
        }
        let Some(len) = height.checked_mul(width).and_then(|n| n.checked_mul(3)) else {
            return fail(MldeStatus::InvalidArgument, "image size overflows");
        };
        let bytes = std::slice::from_raw_parts(pixels, len);
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        let image = match ImageTensor::new(height, width, data) {
            Ok(i) => i,
            Err(e) => return fail(MldeStatus::InvalidArgument, e.to_string()),
        };
        match (*model).inner.predict_image(&image) {
            Ok(p) => {
                *out_fused = p.fused;
                if !out_branches.is_null() {
                    std::ptr::copy_nonoverlapping(p.branches.p.as_ptr(), out_branches, BRANCHES);
                }
                MldeStatus::Ok
            }
            Err(TrainError::Fusion(e)) => fusion_status(e),
            Err(e) => fail(MldeStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// `sum_i softmax(alpha)_i * p_i` for 4 logits and 4 probabilities.
///
/// # Safety
/// `alpha` and `p` must point to 4 doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlde_fuse(alpha: *const f64, p: *const f64, out: *mut f64) -> MldeStatus {
    guard(|| {
        if alpha.is_null() || p.is_null() || out.is_null() {
            return fail(MldeStatus::NullPointer, "null argument");
        }
        let result = FusionParameters::new(read4(alpha))
            .and_then(|params| BranchProbabilities::new(read4(p)).and_then(|probs| fuse(&probs, &params)));
        match result {
            Ok(v) => {
                *out = v;
                MldeStatus::Ok
            }
            Err(e) => fusion_status(e),
        }
    })
}

/// Gradients of `upstream * fused` with respect to alpha and p.
///
/// # Safety
/// Every pointer must reference 4 doubles (outputs writable).
#[no_mangle]
pub unsafe extern "C" fn mlde_fuse_gradients(
    alpha: *const f64,
    p: *const f64,
    upstream: f64,
    out_grad_alpha: *mut f64,
    out_grad_p: *mut f64,
) -> MldeStatus {
    guard(|| {
        if alpha.is_null() || p.is_null() || out_grad_alpha.is_null() || out_grad_p.is_null() {
            return fail(MldeStatus::NullPointer, "null argument");
        }
        let result = FusionParameters::new(read4(alpha)).and_then(|params| {
            BranchProbabilities::new(read4(p)).and_then(|probs| fuse_gradients(&probs, &params, upstream))
        });
        match result {
            Ok(g) => {
                std::ptr::copy_nonoverlapping(g.alpha.as_ptr(), out_grad_alpha, BRANCHES);
                std::ptr::copy_nonoverlapping(g.p.as_ptr(), out_grad_p, BRANCHES);
                MldeStatus::Ok
            }
            Err(e) => fusion_status(e),
        }
    })
}

/// Mann-Whitney AUC of `n` scores with 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlde_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> MldeStatus {
    guard(|| {
        if out.is_null() || (n > 0 && (scores.is_null() || labels.is_null())) {
            return fail(MldeStatus::NullPointer, "null argument");
        }
        let (s, l): (&[f64], &[u8]) = if n == 0 {
            (&[], &[])
        } else {
            (
                std::slice::from_raw_parts(scores, n),
                std::slice::from_raw_parts(labels, n),
            )
        };
        match ScoredSet::new(s, l).and_then(|set| auc(&set)) {
            Ok(a) => {
                *out = a;
                MldeStatus::Ok
            }
            Err(e @ (AucError::Undefined { .. } | AucError::Empty)) => fail(MldeStatus::UndefinedAuc, e.to_string()),
            Err(e @ AucError::NonFinite(_)) => fail(MldeStatus::NonFinite, e.to_string()),
            Err(e) => fail(MldeStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Static NUL-terminated code ("MEL", "NV", ...) of a class index, or null.
#[no_mangle]
pub extern "C" fn mlde_class_code(index: u32) -> *const c_char {
    const CODES: [&CStr; 7] = [c"MEL", c"NV", c"BCC", c"AKIEC", c"BKL", c"DF", c"VASC"];
    match DiagnosisClass::from_index(index as usize) {
        Some(c) => CODES[c.index()].as_ptr(),
        None => std::ptr::null(),
    }
}

/// Number of diagnosis classes.
#[no_mangle]
pub extern "C" fn mlde_class_count() -> u32 {
    DiagnosisClass::COUNT as u32
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn mlde_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mlde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
