//! C ABI over the nbase library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns an
//! [`NbStatus`]; on failure `nb_last_error()` describes the cause for the
//! calling thread. Panics are caught and reported as `NB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nbase::cli::CliError;
use nbase::generate::{generate, render, GenerationConfig};
use nbase::score::Corpus;
use nbase::twin::{load_checkpoint, TwinModel};
use nbase::NeuralBase;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Invalid = 5,
    Panic = 6,
}

/// Tokenized corpus.
pub struct NbCorpus(Corpus);
/// Trained twin model.
pub struct NbModel(TwinModel);
/// Model plus corpus plus bucket index.
pub struct NbBase(NeuralBase);

/// Generation parameters. Zero fields take the library defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NbGenerateOptions {
    pub seed: u64,
    pub length_segments: usize,
    pub top_k: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(NbStatus, String);

fn fail(status: NbStatus, msg: impl ToString) -> Failure {
    Failure(status, msg.to_string())
}

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).unwrap_or_default());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            NbStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(Some(format!("panic: {msg}")));
            NbStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(NbStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|e| fail(NbStatus::InvalidUtf8, e))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(NbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(NbStatus::NullPointer, format!("{what} is null")))
}

fn read(path: &PathBuf) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| fail(NbStatus::Io, format!("{}: {e}", path.display())))
}

/// Message for the last failed call on this thread, or null after a success.
/// Valid until the next call from the same thread.
#[no_mangle]
pub extern "C" fn nb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a corpus JSON file written by `nbase ingest`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_corpus_load(path: *const c_char, out: *mut *mut NbCorpus) -> NbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path)?;
        let corpus = Corpus::from_json(&read(&path)?).map_err(|e| fail(NbStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(NbCorpus(corpus)));
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from `nb_corpus_load` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nb_corpus_free(corpus: *mut NbCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Number of segments, or 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_corpus_segment_count(corpus: *const NbCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.segments().len())
}

/// Loads a checkpoint written by `nbase train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_model_load(path: *const c_char, out: *mut *mut NbModel) -> NbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path)?;
        let model = load_checkpoint(&read(&path)?).map_err(|e| fail(NbStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(NbModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `nb_model_load` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nb_model_free(model: *mut NbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of buckets H, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_model_bucket_count(model: *const NbModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dims.buckets)
}

/// Indexes `corpus` with `model`. Both inputs are copied and stay owned by
/// the caller.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_base_build(model: *const NbModel, corpus: *const NbCorpus, out: *mut *mut NbBase) -> NbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = handle(model, "model")?;
        let corpus = handle(corpus, "corpus")?;
        let base = NeuralBase::build(model.0.clone(), corpus.0.clone()).map_err(|e| fail(NbStatus::Invalid, e))?;
        *out = Box::into_raw(Box::new(NbBase(base)));
        Ok(())
    })
}

/// Loads a base file written by `nbase build`, with its corpus and model.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_base_load(path: *const c_char, out: *mut *mut NbBase) -> NbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path)?;
        let base = nbase::cli::load_base(&path).map_err(|e| {
            let status = if matches!(e, CliError::Io { .. }) { NbStatus::Io } else { NbStatus::Parse };
            fail(status, e)
        })?;
        *out = Box::into_raw(Box::new(NbBase(base)));
        Ok(())
    })
}

/// # Safety
/// `base` must come from `nb_base_build` or `nb_base_load` and not be freed
/// twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nb_base_free(base: *mut NbBase) {
    if !base.is_null() {
        drop(Box::from_raw(base));
    }
}

/// Number of indexed segments, or 0 for a null handle.
///
/// # Safety
/// `base` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nb_base_segment_count(base: *const NbBase) -> usize {
    base.as_ref().map_or(0, |b| b.0.len())
}

/// Copies the bucket occupancy histogram into `counts` (capacity `len`) and
/// stores the bucket count in `buckets`. Fails with `NB_STATUS_INVALID` when
/// `len` is too small; `buckets` is still written.
///
/// # Safety
/// `counts` must point to `len` writable elements; `buckets` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nb_base_histogram(base: *const NbBase, counts: *mut usize, len: usize, buckets: *mut usize) -> NbStatus {
    guard(|| {
        let base = handle(base, "base")?;
        let buckets = out_ptr(buckets, "buckets")?;
        let hist = base.0.stats().histogram;
        *buckets = hist.len();
        if len < hist.len() {
            return Err(fail(NbStatus::Invalid, format!("need {} slots, got {len}", hist.len())));
        }
        if counts.is_null() {
            return Err(fail(NbStatus::NullPointer, "counts is null"));
        }
        std::slice::from_raw_parts_mut(counts, hist.len()).copy_from_slice(&hist);
        Ok(())
    })
}

/// Generates one song and returns it as Standard MIDI File bytes. Release
/// the buffer with `nb_bytes_free(*data, *len)`.
///
/// # Safety
/// Handles and out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nb_generate_midi(
    base: *const NbBase,
    options: NbGenerateOptions,
    data: *mut *mut u8,
    len: *mut usize,
) -> NbStatus {
    guard(|| {
        let base = handle(base, "base")?;
        let data = out_ptr(data, "data")?;
        let len = out_ptr(len, "len")?;
        let mut cfg = GenerationConfig { seed: options.seed, ..GenerationConfig::default() };
        if options.length_segments > 0 {
            cfg.length_segments = options.length_segments;
        }
        if options.top_k > 0 {
            cfg.top_k = options.top_k;
        }
        let song = generate(&base.0, &cfg).map_err(|e| fail(NbStatus::Invalid, e))?;
        let bytes = render(&song, &base.0.corpus.vocab, &cfg).map_err(|e| fail(NbStatus::Invalid, e))?;
        let boxed = bytes.into_boxed_slice();
        *len = boxed.len();
        *data = Box::into_raw(boxed).cast();
        Ok(())
    })
}

/// Releases a buffer returned by `nb_generate_midi`.
///
/// # Safety
/// `data` and `len` must be exactly what the library returned. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nb_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}
