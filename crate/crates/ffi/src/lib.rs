//! C interface to `dualdec`.
//!
//! Every function returns a [`DdStatus`]. On failure a message is kept per
//! thread and can be read with [`dd_last_error_message`]. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dualdec::cli::{encode_source, load_bundle};
use dualdec::eval;
use dualdec::model::DualModel;
use dualdec::search::{self, SearchConfig};
use dualdec::subword::SubwordModel;
use dualdec::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Checkpoint = 5,
    Io = 6,
    Internal = 7,
    Panic = 8,
}

/// A loaded checkpoint with its subword models.
pub struct DdModel {
    model: DualModel,
    src_bpe: SubwordModel,
    tgt_bpe: SubwordModel,
}

/// Result of one dual translation.
pub struct DdTranslation {
    texts: Vec<CString>,
    score: f64,
}

/// Search settings exposed to C. Anything not listed keeps the library default.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DdSearchOptions {
    pub beam_size: u32,
    pub max_len: u32,
    pub length_penalty_alpha: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(DdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) => DdStatus::Config,
            Error::Checkpoint(_) => DdStatus::Checkpoint,
            Error::Io { .. } => DdStatus::Io,
            Error::Internal(_) | Error::Numeric(_) | Error::DegenerateMask { .. } => DdStatus::Internal,
            _ => DdStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside dualdec");
            DdStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(DdStatus::NullPointer, format!("{what} is null")))
}

unsafe fn utf8<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DdStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DdStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Message for the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library defaults: beam 4, at most 100 tokens per side, alpha 1.
#[no_mangle]
pub extern "C" fn dd_search_options_default() -> DdSearchOptions {
    let d = SearchConfig::default();
    DdSearchOptions {
        beam_size: d.beam_size as u32,
        max_len: d.max_len as u32,
        length_penalty_alpha: d.length_penalty_alpha,
    }
}

/// Loads a checkpoint written by `dualdec train` or `dualdec pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dd_model_load(path: *const c_char, out: *mut *mut DdModel) -> DdStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(DdStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let path = utf8(path, "path")?;
        let (model, src_bpe, tgt_bpe) = load_bundle(Path::new(path))?;
        *out = Box::into_raw(Box::new(DdModel { model, src_bpe, tgt_bpe }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_model_free(model: *mut DdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of decoders, 1 or 2. Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_model_num_decoders(model: *const DdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.num_decoders() as u32)
}

/// Translates one sentence with synchronous beam search over both decoders.
/// `tag` and `options` may be null.
///
/// # Safety
/// Pointers must be null or valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dd_translate(
    model: *const DdModel,
    source: *const c_char,
    tag: *const c_char,
    options: *const DdSearchOptions,
    out: *mut *mut DdTranslation,
) -> DdStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(DdStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let m = non_null(model, "model")?;
        let source = utf8(source, "source")?;
        let tag = if tag.is_null() { None } else { Some(utf8(tag, "tag")?) };
        let mut cfg = SearchConfig::default();
        if let Some(o) = options.as_ref() {
            cfg.beam_size = o.beam_size as usize;
            cfg.max_len = o.max_len as usize;
            cfg.length_penalty_alpha = o.length_penalty_alpha;
        }
        cfg.validate(m.model.config().tgt_vocab)?;
        let src = encode_source(&m.src_bpe, source, tag)?;
        let hyp = search::dual_beam_search(&m.model, &src, &cfg)?;
        let texts = (0..m.model.num_decoders())
            .map(|side| {
                let text = m.tgt_bpe.decode(&hyp.output(side))?;
                Ok(CString::new(text).unwrap_or_default())
            })
            .collect::<Result<Vec<_>, Error>>()?;
        *out = Box::into_raw(Box::new(DdTranslation { texts, score: hyp.score }));
        Ok(())
    })
}

/// Output text of decoder `side`, or null if the side does not exist.
/// Owned by the translation handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_translation_text(t: *const DdTranslation, side: u32) -> *const c_char {
    t.as_ref()
        .and_then(|t| t.texts.get(side as usize))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Length-normalized joint score; NaN for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_translation_score(t: *const DdTranslation) -> f64 {
    t.as_ref().map_or(f64::NAN, |t| t.score)
}

/// # Safety
/// `t` must come from [`dd_translate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_translation_free(t: *mut DdTranslation) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Corpus BLEU-4 (0 to 100) over `n` whitespace-tokenized sentence pairs.
///
/// # Safety
/// `hyps` and `refs` must point to `n` NUL-terminated strings each.
#[no_mangle]
pub unsafe extern "C" fn dd_bleu(hyps: *const *const c_char, refs: *const *const c_char, n: usize, out: *mut f64) -> DdStatus {
    guard(|| {
        if hyps.is_null() || refs.is_null() || out.is_null() {
            return Err(Failure(DdStatus::NullPointer, "null argument".into()));
        }
        let read = |arr: *const *const c_char, what: &str| -> Result<Vec<Vec<String>>, Failure> {
            (0..n)
                .map(|i| Ok(utf8(*arr.add(i), what)?.split_whitespace().map(str::to_string).collect()))
                .collect()
        };
        let (h, r) = (read(hyps, "hypothesis")?, read(refs, "reference")?);
        *out = eval::bleu(&h, &r)?;
        Ok(())
    })
}
