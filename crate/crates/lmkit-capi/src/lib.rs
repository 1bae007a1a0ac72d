//! C ABI over the lmkit toolkit: opaque model handles, integer status codes,
//! and a thread-local error message. Every entry point catches panics, so no
//! unwind ever crosses the FFI boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lmkit::arpa::ArpaError;
use lmkit::model::BackoffModel;
use lmkit::prune::PruneThreshold;

/// Result of every fallible call. Anything but `LM_STATUS_OK` leaves a
/// message retrievable via `lm_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// File could not be opened, read, or written.
    Io = 3,
    /// Model file is not valid ARPA text.
    Parse = 4,
    /// The operation itself failed (bad parameter, degenerate model, ...).
    Compute = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Opaque backoff language model. Create with `lm_model_read`; destroy with
/// `lm_model_free`.
pub struct LmModel {
    inner: BackoffModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', "?");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NUL bytes stripped");
    });
}

fn fail(status: LmStatus, message: &str) -> LmStatus {
    set_error(message);
    status
}

/// Message describing this thread's most recent failure. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn lm_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn guarded(body: impl FnOnce() -> LmStatus) -> LmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(LmStatus::Panic, "internal panic caught at the FFI boundary"),
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for the call.
unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, LmStatus> {
    if ptr.is_null() {
        return Err(fail(LmStatus::NullArgument, &format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(LmStatus::InvalidUtf8, &format!("{name} is not valid UTF-8")))
}

fn model_arg<'a>(ptr: *const LmModel) -> Result<&'a BackoffModel, LmStatus> {
    // Safety: caller contract; null is rejected here.
    unsafe {
        ptr.as_ref()
            .map(|m| &m.inner)
            .ok_or_else(|| fail(LmStatus::NullArgument, "model is null"))
    }
}

fn arpa_status(err: &ArpaError, reading: bool) -> LmStatus {
    match err {
        ArpaError::Io(_) => LmStatus::Io,
        ArpaError::Parse { .. } if reading => LmStatus::Parse,
        ArpaError::Parse { .. } => LmStatus::Compute,
    }
}

/// Loads an ARPA model from `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lm_model_read(path: *const c_char, out: *mut *mut LmModel) -> LmStatus {
    guarded(|| {
        if out.is_null() {
            return fail(LmStatus::NullArgument, "out is null");
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let file = match File::open(Path::new(path)) {
            Ok(f) => f,
            Err(e) => return fail(LmStatus::Io, &format!("cannot open {path}: {e}")),
        };
        match lmkit::read_arpa(BufReader::new(file)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(LmModel { inner: model }));
                LmStatus::Ok
            }
            Err(e) => fail(arpa_status(&e, true), &format!("{path}: {e}")),
        }
    })
}

/// Serializes the model as ARPA text at `path`.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lm_model_write(model: *const LmModel, path: *const c_char) -> LmStatus {
    guarded(|| {
        let model = match model_arg(model) {
            Ok(m) => m,
            Err(status) => return status,
        };
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let file = match File::create(Path::new(path)) {
            Ok(f) => f,
            Err(e) => return fail(LmStatus::Io, &format!("cannot create {path}: {e}")),
        };
        match lmkit::write_arpa(model, BufWriter::new(file)) {
            Ok(_) => LmStatus::Ok,
            Err(e) => fail(arpa_status(&e, false), &format!("{path}: {e}")),
        }
    })
}

/// Releases a model handle. Null is a no-op; a handle must not be used after.
#[no_mangle]
pub extern "C" fn lm_model_free(model: *mut LmModel) {
    if !model.is_null() {
        // Safety: only handles produced by this library reach here.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Highest n-gram order of the model, or 0 when the handle is null.
#[no_mangle]
pub extern "C" fn lm_model_order(model: *const LmModel) -> u32 {
    match model_arg(model) {
        Ok(m) => m.order() as u32,
        Err(_) => 0,
    }
}

/// Number of entries stored at `order` (1-based), or 0 when out of range.
#[no_mangle]
pub extern "C" fn lm_model_entry_count(model: *const LmModel, order: u32) -> u64 {
    match model_arg(model) {
        Ok(m) if (1..=m.order() as u32).contains(&order) => m.entry_count(order as usize) as u64,
        _ => 0,
    }
}

/// Conditional log10 probability of `word` after `context` (an array of
/// `context_len` token strings, oldest first). Out-of-vocabulary tokens are
/// scored through `<unk>`; longer contexts than the model uses are truncated.
///
/// # Safety
/// `context` must point to `context_len` NUL-terminated strings (it may be
/// null only when `context_len` is 0); `word` and `out_log10_prob` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn lm_model_query(
    model: *const LmModel,
    context: *const *const c_char,
    context_len: usize,
    word: *const c_char,
    out_log10_prob: *mut f64,
) -> LmStatus {
    guarded(|| {
        let model = match model_arg(model) {
            Ok(m) => m,
            Err(status) => return status,
        };
        if out_log10_prob.is_null() {
            return fail(LmStatus::NullArgument, "out_log10_prob is null");
        }
        if context.is_null() && context_len > 0 {
            return fail(LmStatus::NullArgument, "context is null");
        }
        let word = match utf8_arg(word, "word") {
            Ok(w) => w,
            Err(status) => return status,
        };
        let mut tokens: Vec<&str> = Vec::with_capacity(context_len);
        for i in 0..context_len {
            match utf8_arg(*context.add(i), "context token") {
                Ok(t) => tokens.push(t),
                Err(status) => return status,
            }
        }
        *out_log10_prob = lmkit::query(model, &tokens, word);
        LmStatus::Ok
    })
}

/// Prunes the model at relative-entropy threshold `theta` into a new handle.
///
/// # Safety
/// `model` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lm_model_prune(
    model: *const LmModel,
    theta: f64,
    out: *mut *mut LmModel,
) -> LmStatus {
    guarded(|| {
        let model = match model_arg(model) {
            Ok(m) => m,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail(LmStatus::NullArgument, "out is null");
        }
        let threshold = match PruneThreshold::new(theta) {
            Ok(t) => t,
            Err(e) => return fail(LmStatus::Compute, &e.to_string()),
        };
        match lmkit::prune(model, threshold) {
            Ok(pruned) => {
                *out = Box::into_raw(Box::new(LmModel { inner: pruned }));
                LmStatus::Ok
            }
            Err(e) => fail(LmStatus::Compute, &e.to_string()),
        }
    })
}

/// Scores a segmented corpus file (UTF-8, one sentence per line, tokens
/// space-separated). Writes perplexity, predicted-token count, and
/// out-of-vocabulary count through the out pointers (each may be null).
///
/// # Safety
/// `model` must come from this library; `corpus_path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lm_model_perplexity_file(
    model: *const LmModel,
    corpus_path: *const c_char,
    out_perplexity: *mut f64,
    out_tokens: *mut u64,
    out_oov_tokens: *mut u64,
) -> LmStatus {
    guarded(|| {
        let model = match model_arg(model) {
            Ok(m) => m,
            Err(status) => return status,
        };
        let path = match utf8_arg(corpus_path, "corpus_path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let text = match std::fs::read_to_string(Path::new(path)) {
            Ok(t) => t,
            Err(e) => return fail(LmStatus::Io, &format!("cannot read {path}: {e}")),
        };
        let corpus: Vec<Vec<String>> = text
            .lines()
            .map(|line| line.split_whitespace().map(str::to_string).collect())
            .collect();
        match lmkit::perplexity(model, &corpus) {
            Ok(report) => {
                if !out_perplexity.is_null() {
                    *out_perplexity = report.perplexity;
                }
                if !out_tokens.is_null() {
                    *out_tokens = report.tokens;
                }
                if !out_oov_tokens.is_null() {
                    *out_oov_tokens = report.oov_tokens;
                }
                LmStatus::Ok
            }
            Err(e) => fail(LmStatus::Compute, &e.to_string()),
        }
    })
}
