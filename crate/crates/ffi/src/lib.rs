//! C interface to `makd`: load, save, run and factorize models, plus the
//! Rouge-L metric.
//!
//! Models are opaque `MakdModel` handles owned by the caller and released
//! with `makd_model_free`. Every fallible call returns a `MakdStatus`; on
//! failure `makd_last_error` describes the most recent error on the calling
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use makd::eval::rouge_l_text;
use makd::factorize::{build_student, FactorizationSpec};
use makd::transformer::{Input, ModelKind, TransformerModel};
use makd::MakdError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MakdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Rank = 4,
    Config = 5,
    MissingFile = 6,
    Io = 7,
    Checkpoint = 8,
    Architecture = 9,
    Numeric = 10,
    Panic = 11,
}

impl From<&MakdError> for MakdStatus {
    fn from(e: &MakdError) -> Self {
        match e.category() {
            "shape" => MakdStatus::Shape,
            "rank" => MakdStatus::Rank,
            "config" => MakdStatus::Config,
            "missing-file" => MakdStatus::MissingFile,
            "io" => MakdStatus::Io,
            "checkpoint" => MakdStatus::Checkpoint,
            "architecture" => MakdStatus::Architecture,
            "non-finite" | "no-convergence" | "degenerate-attention" => MakdStatus::Numeric,
            _ => MakdStatus::InvalidArgument,
        }
    }
}

/// Opaque model handle.
pub struct MakdModel {
    inner: TransformerModel,
}

/// Architecture summary filled in by `makd_model_info`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MakdModelInfo {
    /// 0 for a masked-LM encoder, 1 for a causal decoder.
    pub kind: u32,
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub parameters: usize,
    /// Non-zero when any projection is stored as low-rank factors.
    pub factorized: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: MakdStatus, msg: &str) -> MakdStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (MakdStatus, String)>) -> MakdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MakdStatus::Ok
        }
        Ok(Err((status, msg))) => fail(status, &msg),
        Err(_) => fail(MakdStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: MakdError) -> (MakdStatus, String) {
    (MakdStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (MakdStatus, String) {
    (MakdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (MakdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s =
        CStr::from_ptr(p).to_str().map_err(|_| (MakdStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MakdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (MakdStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn makd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next `makd_*` call on the same thread.
#[no_mangle]
pub extern "C" fn makd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn makd_model_load(path: *const c_char, out: *mut *mut MakdModel) -> MakdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let inner = TransformerModel::load(&path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MakdModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn makd_model_free(model: *mut MakdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model to `path` in the checkpoint format.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn makd_model_save(model: *const MakdModel, path: *const c_char) -> MakdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path, "path")?;
        m.inner.save(&path).map_err(lib_err)
    })
}

/// Total number of stored parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn makd_model_num_params(model: *const MakdModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_params())
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn makd_model_info(model: *const MakdModel, out: *mut MakdModelInfo) -> MakdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.inner.config;
        *out = MakdModelInfo {
            kind: match c.kind {
                ModelKind::EncoderMlm => 0,
                ModelKind::DecoderCausal => 1,
            },
            layers: c.layers,
            hidden: c.hidden,
            ffn: c.ffn,
            heads: c.heads,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
            parameters: m.inner.num_params(),
            factorized: u32::from(!c.is_dense()),
        };
        Ok(())
    })
}

/// Logits for one unpadded sequence of `len` token ids. `out` must hold
/// `out_len = len * vocab_size` doubles, written row by row.
///
/// # Safety
/// `ids` must point to `len` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn makd_model_logits(
    model: *const MakdModel,
    ids: *const usize,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> MakdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if ids.is_null() {
            return Err(null("ids"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if len == 0 {
            return Err((MakdStatus::InvalidArgument, "empty sequence".into()));
        }
        let need = len * m.inner.config.vocab_size;
        if out_len != need {
            return Err((MakdStatus::Shape, format!("output buffer holds {out_len} values, need {need}")));
        }
        let ids = std::slice::from_raw_parts(ids, len);
        let logits = m.inner.logits(&Input::single(ids)).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(logits.data());
        Ok(())
    })
}

/// Builds a student whose projections are rank-`rank` truncations of the
/// teacher's. On success `*out` receives a new handle.
///
/// # Safety
/// `teacher` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn makd_model_factorize(
    teacher: *const MakdModel,
    rank: usize,
    out: *mut *mut MakdModel,
) -> MakdStatus {
    guard(|| {
        let t = teacher.as_ref().ok_or_else(|| null("teacher"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = build_student(&t.inner, &FactorizationSpec::uniform(rank)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MakdModel { inner }));
        Ok(())
    })
}

/// Rouge-L of whitespace-tokenized `candidate` against `reference`. Any of
/// the output pointers may be null.
///
/// # Safety
/// Both strings must be NUL-terminated; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn makd_rouge_l(
    candidate: *const c_char,
    reference: *const c_char,
    precision: *mut f64,
    recall: *mut f64,
    f1: *mut f64,
) -> MakdStatus {
    guard(|| {
        let c = str_arg(candidate, "candidate")?;
        let r = str_arg(reference, "reference")?;
        let score = rouge_l_text(c, r).map_err(lib_err)?;
        for (p, v) in [(precision, score.precision), (recall, score.recall), (f1, score.f1)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}
