//! C ABI over the toy model, bound verification, the prefix template and
//! the synthetic corpus generator.
//!
//! Every fallible call returns a [`UpftStatus`]. On failure the message is
//! kept per thread and can be read with [`upft_last_error`]. Strings handed
//! out by the library must be released with [`upft_string_free`], models
//! with [`upft_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use upft::bounds::{verify_bounds, AnswerLikelihood, BoundProblem, EnumOptions, SchemeReader};
use upft::corpus::{generate_synthetic, ExtractionScheme, Question, SyntheticTaskSpec, SyntheticVocab, TokenId};
use upft::pipeline::apply_template;
use upft::toy_model::{load_checkpoint, ToyModel};
use upft::{jsonl, Error, ErrorClass};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Validation = 3,
    Transport = 4,
    Resource = 5,
    Verification = 6,
    BufferTooSmall = 7,
    Other = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct UpftModel {
    inner: ToyModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn cstring_lossy(s: impl Into<Vec<u8>>) -> CString {
    CString::new(s).unwrap_or_else(|e| {
        let nul = e.nul_position();
        let mut v = e.into_vec();
        v.truncate(nul);
        CString::new(v).expect("truncated at first nul")
    })
}

fn set_error(msg: impl Into<Vec<u8>>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(cstring_lossy(msg)));
}

fn fail(status: UpftStatus, msg: impl Into<Vec<u8>>) -> UpftStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> UpftStatus {
    let status = match e.class() {
        ErrorClass::Validation => UpftStatus::Validation,
        ErrorClass::Transport => UpftStatus::Transport,
        ErrorClass::Resource => UpftStatus::Resource,
        ErrorClass::Verification => UpftStatus::Verification,
        ErrorClass::Other => UpftStatus::Other,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`UpftStatus::Panic`].
fn guard(f: impl FnOnce() -> UpftStatus) -> UpftStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(UpftStatus::Panic, "panic inside upft"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, UpftStatus> {
    if p.is_null() {
        return Err(fail(UpftStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(UpftStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn tokens_arg<'a>(p: *const u32, len: usize, name: &str) -> Result<&'a [TokenId], UpftStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(UpftStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const UpftModel) -> Result<&'a ToyModel, UpftStatus> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| fail(UpftStatus::NullPointer, "model is null"))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> UpftStatus {
    if out.is_null() {
        return fail(UpftStatus::NullPointer, "output pointer is null");
    }
    *out = cstring_lossy(s).into_raw();
    UpftStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! lib {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return from_error(e),
        }
    };
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn upft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn upft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn upft_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn upft_model_load(path: *const c_char, out: *mut *mut UpftModel) -> UpftStatus {
    guard(|| {
        let path = tri!(str_arg(path, "path"));
        if out.is_null() {
            return fail(UpftStatus::NullPointer, "output pointer is null");
        }
        let inner = lib!(load_checkpoint(Path::new(path)));
        *out = Box::into_raw(Box::new(UpftModel { inner }));
        UpftStatus::Ok
    })
}

/// Uniform model. `end_token < 0` means no end token.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn upft_model_uniform(
    vocab_size: usize,
    order: usize,
    end_token: i64,
    out: *mut *mut UpftModel,
) -> UpftStatus {
    guard(|| {
        if out.is_null() {
            return fail(UpftStatus::NullPointer, "output pointer is null");
        }
        let end = match end_token {
            e if e < 0 => None,
            e => match TokenId::try_from(e) {
                Ok(e) => Some(e),
                Err(_) => return fail(UpftStatus::Validation, "end token out of range"),
            },
        };
        let inner = lib!(ToyModel::uniform(vocab_size, order, end));
        *out = Box::into_raw(Box::new(UpftModel { inner }));
        UpftStatus::Ok
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn upft_model_free(m: *mut UpftModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Sets the logit row following `context` (only the last `order` tokens
/// matter).
///
/// # Safety
/// `context` must hold `context_len` ids and `logits` `n_logits` values.
#[no_mangle]
pub unsafe extern "C" fn upft_model_set_logits(
    m: *mut UpftModel,
    context: *const u32,
    context_len: usize,
    logits: *const f64,
    n_logits: usize,
) -> UpftStatus {
    guard(|| {
        let Some(m) = m.as_mut() else {
            return fail(UpftStatus::NullPointer, "model is null");
        };
        let ctx = tri!(tokens_arg(context, context_len, "context"));
        if logits.is_null() {
            return fail(UpftStatus::NullPointer, "logits is null");
        }
        let row = std::slice::from_raw_parts(logits, n_logits).to_vec();
        lib!(m.inner.set_logits(ctx, row));
        UpftStatus::Ok
    })
}

/// `log p(next | context)` at temperature 1.
///
/// # Safety
/// `context` must hold `context_len` ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn upft_model_token_log_prob(
    m: *const UpftModel,
    context: *const u32,
    context_len: usize,
    next: u32,
    out: *mut f64,
) -> UpftStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let ctx = tri!(tokens_arg(context, context_len, "context"));
        if out.is_null() {
            return fail(UpftStatus::NullPointer, "output pointer is null");
        }
        *out = lib!(m.token_log_prob(ctx, next));
        UpftStatus::Ok
    })
}

/// `log p(seq | prompt)`.
///
/// # Safety
/// Arrays must hold the given number of ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn upft_model_sequence_log_prob(
    m: *const UpftModel,
    prompt: *const u32,
    prompt_len: usize,
    seq: *const u32,
    seq_len: usize,
    out: *mut f64,
) -> UpftStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let prompt = tri!(tokens_arg(prompt, prompt_len, "prompt"));
        let seq = tri!(tokens_arg(seq, seq_len, "seq"));
        if out.is_null() {
            return fail(UpftStatus::NullPointer, "output pointer is null");
        }
        *out = lib!(m.sequence_log_prob(prompt, seq));
        UpftStatus::Ok
    })
}

/// Greedy continuation of `prompt` for at most `max_len` tokens, written to
/// `buf`. `*out_len` always receives the full length; if it exceeds `cap`
/// nothing is written and [`UpftStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// `prompt` must hold `prompt_len` ids, `buf` room for `cap` ids, and
/// `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn upft_model_greedy(
    m: *const UpftModel,
    prompt: *const u32,
    prompt_len: usize,
    max_len: usize,
    buf: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> UpftStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let prompt = tri!(tokens_arg(prompt, prompt_len, "prompt"));
        if out_len.is_null() {
            return fail(UpftStatus::NullPointer, "out_len is null");
        }
        let seq = lib!(m.greedy_decode(prompt, max_len));
        *out_len = seq.len();
        if seq.len() > cap {
            return fail(UpftStatus::BufferTooSmall, format!("need {} slots, got {cap}", seq.len()));
        }
        if !seq.is_empty() {
            if buf.is_null() {
                return fail(UpftStatus::NullPointer, "buf is null");
            }
            ptr::copy_nonoverlapping(seq.as_ptr(), buf, seq.len());
        }
        UpftStatus::Ok
    })
}

/// Exact marginal, Jensen and prefix bounds for `prompt` (synthetic
/// vocabulary text) and `answer`, as a JSON report. `epsilon <= 0` selects
/// the indicator likelihood, otherwise the smoothed one.
///
/// # Safety
/// Strings must be nul-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn upft_verify_bounds_json(
    m: *const UpftModel,
    prompt: *const c_char,
    answer: *const c_char,
    max_len: usize,
    epsilon: f64,
    out_json: *mut *mut c_char,
) -> UpftStatus {
    guard(|| {
        let m = tri!(model_arg(m));
        let prompt = tri!(str_arg(prompt, "prompt"));
        let answer = tri!(str_arg(answer, "answer"));
        let reader = SchemeReader(ExtractionScheme::Synthetic);
        let problem = BoundProblem {
            model: m,
            prompt: lib!(SyntheticVocab.encode(prompt)),
            answer: answer.to_string(),
            max_len,
            reader: &reader,
            likelihood: if epsilon > 0.0 {
                AnswerLikelihood::Smoothed { epsilon }
            } else {
                AnswerLikelihood::Indicator
            },
            options: EnumOptions::default(),
        };
        let grid: Vec<usize> = (0..=max_len).collect();
        let report = lib!(verify_bounds(&problem, &grid));
        let json = lib!(serde_json::to_string(&report).map_err(Error::from));
        put_string(out_json, json)
    })
}

/// Question text followed by the prefix instruction.
///
/// # Safety
/// `prompt` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn upft_apply_template(prompt: *const c_char, out: *mut *mut c_char) -> UpftStatus {
    guard(|| {
        let prompt = tri!(str_arg(prompt, "prompt"));
        put_string(out, apply_template(&Question::new("ffi", prompt)))
    })
}

/// Synthetic corpus as JSONL.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn upft_synth_jsonl(
    n_questions: usize,
    n_steps: usize,
    modulus: u32,
    seed: u64,
    out: *mut *mut c_char,
) -> UpftStatus {
    guard(|| {
        let qs = lib!(generate_synthetic(&SyntheticTaskSpec::new(n_questions, n_steps, modulus, seed)));
        put_string(out, lib!(jsonl::to_string(&qs)))
    })
}
