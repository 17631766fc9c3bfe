//! C interface to the sparse adaptation toolkit.
//!
//! Models and sparse deltas cross the boundary as opaque handles that the
//! caller frees with the matching `*_free` function. Every fallible call
//! returns a [`SpartaStatus`]; on failure the message is kept per thread and
//! can be read with [`sparta_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sparta_core::delta_file::{DeltaFile, IndexMode, ValueDtype};
use sparta_core::memory;
use sparta_core::model::{
    predict_logits, HeadInit, ModelConfig, ParameterStore, TargetSet, TokenBatch,
};
use sparta_core::sparta::{sample_indices, SparseDelta, SparsityConfig};
use sparta_core::{checkpoint, Error, ErrorCategory};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpartaStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullArgument = 1,
    /// Invalid configuration or an out-of-range request.
    Usage = 2,
    /// Malformed input data or files.
    Data = 3,
    /// Any other failure, including I/O.
    Runtime = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// A model checkpoint.
pub struct SpartaModel {
    store: ParameterStore,
}

/// A sparse delta (index set and values) bound to one base model.
pub struct SpartaDelta {
    file: DeltaFile,
}

/// Architecture for [`sparta_model_init`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SpartaModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    /// 0 keeps the vocabulary-sized head.
    pub num_classes: usize,
}

/// Training-memory accounting in bytes at 16-bit width.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SpartaMemoryReport {
    pub n: u64,
    pub m: u64,
    pub fullft_train_bytes: u64,
    pub sparta_train_bytes: u64,
    pub extra_adapter_bytes: u64,
    pub storage_bytes: u64,
    /// NaN when there are no savings.
    pub savings_fraction: f64,
    pub breakeven: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SpartaStatus {
    match e.category() {
        ErrorCategory::Usage => SpartaStatus::Usage,
        ErrorCategory::Data => SpartaStatus::Data,
        ErrorCategory::Runtime => SpartaStatus::Runtime,
    }
}

struct Fail(SpartaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SpartaStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpartaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpartaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SpartaStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(SpartaStatus::NullArgument, "path is not valid UTF-8".into()))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sparta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a randomly initialized model.
///
/// # Safety
/// `config` must point to a valid struct and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sparta_model_init(
    config: *const SpartaModelConfig,
    seed: u64,
    out: *mut *mut SpartaModel,
) -> SpartaStatus {
    guard(|| {
        let c = *handle(config, "config")?;
        if c.num_heads == 0 || c.hidden_dim % c.num_heads != 0 {
            return Err(Fail(
                SpartaStatus::Usage,
                "hidden_dim must be a multiple of num_heads".into(),
            ));
        }
        let cfg = ModelConfig {
            vocab_size: c.vocab_size,
            hidden_dim: c.hidden_dim,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            num_kv_heads: c.num_kv_heads,
            head_dim: c.hidden_dim / c.num_heads,
            mlp_dim: c.mlp_dim,
            max_seq_len: c.max_seq_len,
            num_classes: c.vocab_size,
        };
        let mut store = ParameterStore::init_pretrained(&cfg, seed)?;
        if c.num_classes > 0 {
            store = store.swap_head(c.num_classes, &HeadInit::Random { seed })?;
        }
        put(out, SpartaModel { store })
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sparta_model_load(
    path: *const c_char,
    out: *mut *mut SpartaModel,
) -> SpartaStatus {
    guard(|| {
        let store = checkpoint::load(&path_arg(path)?)?;
        put(out, SpartaModel { store })
    })
}

/// Writes a checkpoint file atomically.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sparta_model_save(
    model: *const SpartaModel,
    path: *const c_char,
) -> SpartaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        checkpoint::save(&m.store, &path_arg(path)?)?;
        Ok(())
    })
}

/// Total scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sparta_model_num_scalars(model: *const SpartaModel) -> u64 {
    model.as_ref().map_or(0, |m| m.store.num_scalars() as u64)
}

/// Rows of the classification head, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sparta_model_num_classes(model: *const SpartaModel) -> usize {
    model.as_ref().map_or(0, |m| m.store.config().num_classes)
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sparta_model_free(model: *mut SpartaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Draws a random index set over all sparsifiable tensors of `model` at
/// `density` and returns an all-zero delta for it.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sparta_sample_indices(
    model: *const SpartaModel,
    density: f64,
    seed: u64,
    out: *mut *mut SpartaDelta,
) -> SpartaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let sparsity = SparsityConfig::new(density, TargetSet::all_sparsifiable(), seed);
        let index = sample_indices(&m.store, &sparsity)?;
        let file = DeltaFile {
            model_fingerprint: m.store.fingerprint(),
            sparsity,
            mode: IndexMode::Explicit,
            value_dtype: ValueDtype::F32,
            delta: SparseDelta::zeros(&index),
            index,
            dense: Vec::new(),
        };
        put(out, SpartaDelta { file })
    })
}

/// Loads a sparse-delta file and checks it against `base`.
///
/// # Safety
/// `base` must be a live handle, `path` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sparta_delta_load(
    path: *const c_char,
    base: *const SpartaModel,
    out: *mut *mut SpartaDelta,
) -> SpartaStatus {
    guard(|| {
        let b = handle(base, "base")?;
        let file = DeltaFile::load(&path_arg(path)?, Some(&b.store))?;
        file.check_base(&b.store)?;
        put(out, SpartaDelta { file })
    })
}

/// Writes a sparse-delta file atomically.
///
/// # Safety
/// `delta` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sparta_delta_save(
    delta: *const SpartaDelta,
    path: *const c_char,
) -> SpartaStatus {
    guard(|| {
        let d = handle(delta, "delta")?;
        d.file.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Number of selected scalars, or 0 for a null handle.
///
/// # Safety
/// `delta` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sparta_delta_count(delta: *const SpartaDelta) -> usize {
    delta.as_ref().map_or(0, |d| d.file.delta.count())
}

/// Overwrites the delta values in index order. `len` must equal
/// [`sparta_delta_count`].
///
/// # Safety
/// `delta` must be a live handle and `values` readable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sparta_delta_set_values(
    delta: *mut SpartaDelta,
    values: *const f32,
    len: usize,
) -> SpartaStatus {
    guard(|| {
        let d = delta.as_mut().ok_or_else(|| null("delta"))?;
        if values.is_null() {
            return Err(null("values"));
        }
        if len != d.file.delta.count() {
            return Err(Fail(
                SpartaStatus::Usage,
                format!("expected {} values, got {len}", d.file.delta.count()),
            ));
        }
        let src = std::slice::from_raw_parts(values, len);
        if let Some(bad) = src.iter().find(|v| !v.is_finite()) {
            return Err(Fail(SpartaStatus::Data, format!("non-finite value {bad}")));
        }
        let mut at = 0;
        for v in &mut d.file.delta.values {
            let n = v.len();
            v.copy_from_slice(&src[at..at + n]);
            at += n;
        }
        Ok(())
    })
}

/// # Safety
/// `delta` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sparta_delta_free(delta: *mut SpartaDelta) {
    if !delta.is_null() {
        drop(Box::from_raw(delta));
    }
}

/// Folds `delta` into a copy of `base`, producing a standalone model.
///
/// # Safety
/// `base` and `delta` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sparta_inference_merge(
    base: *const SpartaModel,
    delta: *const SpartaDelta,
    out: *mut *mut SpartaModel,
) -> SpartaStatus {
    guard(|| {
        let b = handle(base, "base")?;
        let d = handle(delta, "delta")?;
        let store = d.file.apply(&b.store)?;
        put(out, SpartaModel { store })
    })
}

/// Classifies one token sequence. Writes `num_classes` logits to `logits`
/// when it is non-null and the argmax class to `out_class`.
///
/// # Safety
/// `model` must be a live handle, `tokens` readable for `len` ids, `logits`
/// null or writable for `logits_len` floats, `out_class` writable.
#[no_mangle]
pub unsafe extern "C" fn sparta_classify(
    model: *const SpartaModel,
    tokens: *const u32,
    len: usize,
    logits: *mut f32,
    logits_len: usize,
    out_class: *mut usize,
) -> SpartaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if out_class.is_null() {
            return Err(null("out_class"));
        }
        let c = m.store.config().num_classes;
        if !logits.is_null() && logits_len < c {
            return Err(Fail(
                SpartaStatus::Usage,
                format!("logits buffer holds {logits_len}, model has {c} classes"),
            ));
        }
        let seq: Vec<usize> = std::slice::from_raw_parts(tokens, len)
            .iter()
            .map(|&t| t as usize)
            .collect();
        let batch = TokenBatch::new(&[seq], m.store.config())?;
        let out = predict_logits(&m.store, &batch)?;
        let row = out.row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if !logits.is_null() {
            std::slice::from_raw_parts_mut(logits, c).copy_from_slice(row);
        }
        *out_class = best;
        Ok(())
    })
}

/// Training-memory accounting for `n` scalars at density `k`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sparta_memory_report(
    n: u64,
    density: f64,
    out: *mut SpartaMemoryReport,
) -> SpartaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = memory::memory_report(n, density)?;
        *out = SpartaMemoryReport {
            n: r.n,
            m: r.m,
            fullft_train_bytes: r.fullft_train_bytes,
            sparta_train_bytes: r.sparta_train_bytes,
            extra_adapter_bytes: r.extra_adapter_bytes,
            storage_bytes: r.storage_bytes,
            savings_fraction: r.savings_fraction.unwrap_or(f64::NAN),
            breakeven: r.breakeven,
        };
        Ok(())
    })
}

/// Fraction of full fine-tuning memory saved at density `k`. Fails with
/// `Usage` when `k ≥ 0.5`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sparta_savings_fraction(density: f64, out: *mut f64) -> SpartaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = memory::savings_fraction(density)?;
        Ok(())
    })
}
