//! C ABI over `cnnjm`: load a model file, query it, and score translation
//! hypotheses.
//!
//! Every function returns a [`CnnjmStatus`]. On failure a description is
//! kept per thread and can be read with [`cnnjm_last_error`]. Models are
//! opaque handles; a loaded model is immutable and may be shared between
//! threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cnnjm::artifact::{load_model, ModelArtifact};
use cnnjm::corpus::{parse_alignment_line, parse_heads_line, tokenize};
use cnnjm::encoder::Arch;
use cnnjm::nbest::{score_hypothesis, score_nbest};
use cnnjm::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnnjmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    /// Malformed or corrupted model file.
    Format = 4,
    UnsupportedVersion = 5,
    /// Malformed source, hypothesis, alignment or heads input.
    InvalidInput = 6,
    /// The model's arch needs an alignment (or heads) that was not given.
    MissingGuide = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnnjmArch {
    Generic = 0,
    Tag = 1,
    TagDep = 2,
    Attention = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CnnjmModelInfo {
    pub arch: CnnjmArch,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub maxlen: usize,
    /// Number of previous target words the model conditions on.
    pub history: usize,
    pub parameter_count: usize,
    /// Nonzero when scores include the sentence-end prediction.
    pub emit_eos: u8,
}

/// A loaded model.
pub struct CnnjmModel {
    artifact: ModelArtifact,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> CnnjmStatus {
    match e {
        Error::Io(_) => CnnjmStatus::Io,
        Error::Format(_) | Error::Checksum { .. } | Error::Json(_) => CnnjmStatus::Format,
        Error::UnsupportedVersion(_) => CnnjmStatus::UnsupportedVersion,
        Error::MissingAlignment { .. } | Error::MissingGuide { .. } => CnnjmStatus::MissingGuide,
        _ => CnnjmStatus::InvalidInput,
    }
}

fn fail(status: CnnjmStatus, msg: impl Into<String>) -> CnnjmStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), CnnjmStatus>) -> CnnjmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CnnjmStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(CnnjmStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> CnnjmStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, CnnjmStatus> {
    if p.is_null() {
        return Err(fail(CnnjmStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CnnjmStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, CnnjmStatus> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn model_arg<'a>(p: *const CnnjmModel) -> Result<&'a CnnjmModel, CnnjmStatus> {
    p.as_ref()
        .ok_or_else(|| fail(CnnjmStatus::NullPointer, "model is null"))
}

/// Loads a model file. On success `*out` owns a handle that must be
/// released with [`cnnjm_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cnnjm_model_load(
    path: *const c_char,
    out: *mut *mut CnnjmModel,
) -> CnnjmStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CnnjmStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let artifact = load_model(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CnnjmModel { artifact }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`cnnjm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cnnjm_model_free(model: *mut CnnjmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cnnjm_model_info(
    model: *const CnnjmModel,
    out: *mut CnnjmModelInfo,
) -> CnnjmStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(fail(CnnjmStatus::NullPointer, "out is null"));
        }
        let a = &m.artifact;
        let enc = &a.model.config.encoder;
        *out = CnnjmModelInfo {
            arch: match enc.arch {
                Arch::Generic => CnnjmArch::Generic,
                Arch::Tag => CnnjmArch::Tag,
                Arch::TagDep => CnnjmArch::TagDep,
                Arch::Attention => CnnjmArch::Attention,
            },
            source_vocab_size: a.src_vocab.len(),
            target_vocab_size: a.tgt_vocab.len(),
            maxlen: enc.maxlen,
            history: enc.history,
            parameter_count: a.model.parameter_count(),
            emit_eos: a.emit_eos as u8,
        };
        Ok(())
    })
}

/// Scores one hypothesis: the sum of natural-log word probabilities (plus
/// the sentence end when the model predicts it).
///
/// `source` and `hypothesis` are whitespace-tokenized sentences.
/// `alignment` holds `i-j` pairs (hypothesis word `i`, source word `j`); it
/// is required by tag archs and may be null otherwise. `heads` is a line of
/// dependency heads for the source (`-1` = root), required by the
/// dependency-tag arch and ignored by the others.
///
/// # Safety
/// String arguments must be NUL-terminated or null where allowed; `model`
/// must be a live handle and `out_score` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cnnjm_model_score(
    model: *const CnnjmModel,
    source: *const c_char,
    hypothesis: *const c_char,
    alignment: *const c_char,
    heads: *const c_char,
    out_score: *mut f64,
) -> CnnjmStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out_score.is_null() {
            return Err(fail(CnnjmStatus::NullPointer, "out_score is null"));
        }
        let source = tokenize(str_arg(source, "source")?);
        let hypothesis = tokenize(str_arg(hypothesis, "hypothesis")?);
        let arch = m.artifact.model.arch();
        let alignment = match opt_str_arg(alignment, "alignment")? {
            Some(a) => Some(parse_alignment_line(a).map_err(lib_err)?.transposed()),
            None if arch.needs_affiliation() => {
                return Err(fail(
                    CnnjmStatus::MissingGuide,
                    format!("arch {arch} needs a hypothesis alignment"),
                ))
            }
            None => None,
        };
        let heads = match opt_str_arg(heads, "heads")? {
            Some(h) if arch == Arch::TagDep => {
                Some(parse_heads_line(h, source.len()).map_err(lib_err)?)
            }
            _ => None,
        };
        let score = score_hypothesis(
            &m.artifact,
            &source,
            heads.as_deref(),
            &hypothesis,
            alignment.as_ref(),
        )
        .map_err(lib_err)?;
        *out_score = score;
        Ok(())
    })
}

/// Scores one n-best line against its source sentence and returns the line
/// with `feature= score` appended to its features field. The sentence id of
/// the line is ignored. The returned string must be released with
/// [`cnnjm_string_free`].
///
/// # Safety
/// As for [`cnnjm_model_score`]; `out_line` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cnnjm_score_nbest_line(
    model: *const CnnjmModel,
    source: *const c_char,
    heads: *const c_char,
    line: *const c_char,
    feature: *const c_char,
    out_line: *mut *mut c_char,
) -> CnnjmStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out_line.is_null() {
            return Err(fail(CnnjmStatus::NullPointer, "out_line is null"));
        }
        *out_line = ptr::null_mut();
        let source = tokenize(str_arg(source, "source")?);
        let line = str_arg(line, "line")?;
        let feature = str_arg(feature, "feature")?;
        let heads = match opt_str_arg(heads, "heads")? {
            Some(h) => Some(vec![parse_heads_line(h, source.len()).map_err(lib_err)?]),
            None => None,
        };
        // re-key the line to sentence 0 so it resolves to `source`
        let (_, rest) = line
            .split_once("|||")
            .ok_or_else(|| fail(CnnjmStatus::InvalidInput, "not an n-best line"))?;
        let id_field = &line[..line.len() - rest.len() - 3];
        let keyed = format!("0|||{rest}");
        let scored = score_nbest(&m.artifact, &[source], heads.as_deref(), &[keyed], feature)
            .map_err(lib_err)?;
        let restored = format!("{id_field}{}", &scored[0][1..]);
        let c = CString::new(restored)
            .map_err(|_| fail(CnnjmStatus::InvalidInput, "line contains NUL"))?;
        *out_line = c.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cnnjm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Description of the last failure on the calling thread, or null. The
/// pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn cnnjm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cnnjm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
