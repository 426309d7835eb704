//! C ABI over the `bitformer` model and packed kernels.
//!
//! Every fallible call returns a [`BfStatus`]; on failure the message is
//! kept per thread and readable through [`bf_last_error`]. Models are
//! opaque [`BfModel`] handles released with [`bf_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bitformer::bitkernel::{binary_gemm_acc, words_for, PackedBitMatrix};
use bitformer::model::{build_model, load_checkpoint, save_checkpoint, Model, ModelConfig, Variant};
use bitformer::quant::Mode;
use bitformer::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Checkpoint format, version, checksum or tensor-set mismatch.
    Schema = 4,
    NonFinite = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfVariant {
    Baseline = 0,
    BipftA = 1,
    BipftB = 2,
    Fp = 3,
}

impl From<BfVariant> for Variant {
    fn from(v: BfVariant) -> Self {
        match v {
            BfVariant::Baseline => Variant::Baseline,
            BfVariant::BipftA => Variant::BipftA,
            BfVariant::BipftB => Variant::BipftB,
            BfVariant::Fp => Variant::Fp,
        }
    }
}

/// Opaque model handle.
pub struct BfModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> BfStatus {
    match e {
        Error::Io { .. } => BfStatus::Io,
        Error::NonFinite { .. } => BfStatus::NonFinite,
        Error::MissingTensors(_)
        | Error::Checksum { .. }
        | Error::Version { .. }
        | Error::Truncated(_)
        | Error::BadMagic => BfStatus::Schema,
        _ => BfStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (BfStatus, String)>) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BfStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (BfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (BfStatus, String) {
    (BfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<String, (BfStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (BfStatus::InvalidArgument, "path is not UTF-8".into()))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn bf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fresh model with the small default shape.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_new_tiny(
    vocab: usize,
    variant: BfVariant,
    seed: u64,
    out: *mut *mut BfModel,
) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = ModelConfig::tiny(vocab).with_variant(variant.into());
        cfg.seed = seed;
        let model = build_model(&cfg).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(BfModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_model_load(path: *const c_char, out: *mut *mut BfModel) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let model = load_checkpoint(&path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(BfModel { model }));
        Ok(())
    })
}

/// Writes a checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bf_model_save(model: *const BfModel, path: *const c_char) -> BfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        save_checkpoint(&m.model, path).map_err(lib_err)
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bf_model_free(model: *mut BfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_vocab_size(model: *const BfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.vocab)
}

/// Hidden width, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_hidden_size(model: *const BfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.hidden)
}

/// Longest accepted sequence, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_max_seq(model: *const BfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.max_seq)
}

/// MLM logits for one sequence, row-major `len × vocab`, as `f32`.
///
/// `packed` selects the XNOR-popcount path; otherwise the float simulation
/// runs. `segments` may be NULL (all zero).
///
/// # Safety
/// `tokens` (and `segments` when non-NULL) must hold `len` entries and
/// `logits` must hold `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn bf_model_forward(
    model: *const BfModel,
    tokens: *const u32,
    segments: *const u32,
    len: usize,
    packed: bool,
    logits: *mut f32,
    logits_len: usize,
) -> BfStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let need = len * m.config.vocab;
        if logits_len < need {
            return Err((
                BfStatus::InvalidArgument,
                format!("logits buffer holds {logits_len} floats, need {need}"),
            ));
        }
        let toks: Vec<usize> = std::slice::from_raw_parts(tokens, len)
            .iter()
            .map(|&t| t as usize)
            .collect();
        let segs: Vec<usize> = if segments.is_null() {
            vec![0; len]
        } else {
            std::slice::from_raw_parts(segments, len)
                .iter()
                .map(|&s| s as usize)
                .collect()
        };
        let mode = if packed { Mode::Eval } else { Mode::Train };
        let r = m.forward(&toks, &segs, mode).map_err(lib_err)?;
        let dst = std::slice::from_raw_parts_mut(logits, need);
        for (d, s) in dst.iter_mut().zip(r.mlm_logits.data()) {
            *d = *s as f32;
        }
        Ok(())
    })
}

/// Words per packed row of `cols` bits.
#[no_mangle]
pub extern "C" fn bf_words_for(cols: usize) -> usize {
    words_for(cols)
}

/// Integer accumulators of `A · Bᵀ` for ±1 matrices packed one bit per
/// entry (bit set = +1), rows padded to `bf_words_for(k)` words.
/// `a` is `m × k`, `b_t` is `n × k`, `out` receives `m × n` values.
///
/// # Safety
/// `a`, `b_t` and `out` must point to `m·words`, `n·words` and `m·n`
/// elements respectively.
#[no_mangle]
pub unsafe extern "C" fn bf_binary_gemm(
    a: *const u64,
    b_t: *const u64,
    m: usize,
    n: usize,
    k: usize,
    out: *mut i32,
) -> BfStatus {
    guard(|| {
        if a.is_null() || b_t.is_null() || out.is_null() {
            return Err(null("matrix pointer"));
        }
        let w = words_for(k);
        let pa = PackedBitMatrix::from_words(m, k, std::slice::from_raw_parts(a, m * w).to_vec()).map_err(lib_err)?;
        let pb = PackedBitMatrix::from_words(n, k, std::slice::from_raw_parts(b_t, n * w).to_vec()).map_err(lib_err)?;
        let acc = binary_gemm_acc(&pa, &pb).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, m * n).copy_from_slice(&acc.data);
        Ok(())
    })
}
