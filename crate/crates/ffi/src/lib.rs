//! C interface: open a knowledge base or a trained model from its checkpoint,
//! query knowledge vectors, score instances.
//!
//! Every call returns an [`EdkStatus`]; on failure the message is kept per
//! thread and read with [`edk_last_error`]. Handles are opaque and must be
//! released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use edk::data::InstanceRecord;
use edk::pipeline::kb::KnowledgeBase;
use edk::pipeline::train::TrainedModel;
use edk::EdkError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdkStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Checkpoint = 5,
    /// An id is outside its field's vocabulary.
    Lookup = 6,
    /// The output buffer has the wrong length.
    BufferSize = 7,
    InvalidUtf8 = 8,
    Panic = 9,
}

/// Frozen knowledge base.
pub struct EdkKnowledgeBase {
    inner: KnowledgeBase,
}

/// Trained backbone.
pub struct EdkModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &EdkError) -> EdkStatus {
    match e {
        EdkError::Lookup { .. } => EdkStatus::Lookup,
        EdkError::Checkpoint(_) => EdkStatus::Checkpoint,
        e => match e.exit_code() {
            2 => EdkStatus::Config,
            4 => EdkStatus::Numeric,
            _ => EdkStatus::Data,
        },
    }
}

fn guard(f: impl FnOnce() -> Result<(), EdkStatus>) -> EdkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdkStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            EdkStatus::Panic
        }
    }
}

fn fail(e: EdkError) -> EdkStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> EdkStatus {
    set_error(format!("{what} is null"));
    EdkStatus::NullPointer
}

unsafe fn path_arg(path: *const c_char) -> Result<String, EdkStatus> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path).to_str().map(str::to_owned).map_err(|_| {
        set_error("path is not valid UTF-8".into());
        EdkStatus::InvalidUtf8
    })
}

unsafe fn records_arg(ids: *const u32, n: usize, fields: usize) -> Result<Vec<InstanceRecord>, EdkStatus> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if ids.is_null() {
        return Err(null("ids"));
    }
    let ids = std::slice::from_raw_parts(ids, n * fields);
    Ok(ids
        .chunks(fields)
        .map(|row| InstanceRecord {
            field_values: row.to_vec(),
            label: 0,
            timestamp: 0,
            history: Vec::new(),
        })
        .collect())
}

unsafe fn out_arg<'a>(out: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], EdkStatus> {
    if len != need {
        set_error(format!("output buffer holds {len} values, {need} needed"));
        return Err(EdkStatus::BufferSize);
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if out.is_null() {
        return Err(null("out"));
    }
    Ok(std::slice::from_raw_parts_mut(out, len))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn edk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a knowledge base checkpoint into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn edk_kb_open(path: *const c_char, out: *mut *mut EdkKnowledgeBase) -> EdkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let inner = KnowledgeBase::load(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(EdkKnowledgeBase { inner }));
        Ok(())
    })
}

/// # Safety
/// `kb` must come from [`edk_kb_open`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn edk_kb_free(kb: *mut EdkKnowledgeBase) {
    if !kb.is_null() {
        drop(Box::from_raw(kb));
    }
}

/// Number of fields per instance; 0 for a null handle.
///
/// # Safety
/// `kb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edk_kb_num_fields(kb: *const EdkKnowledgeBase) -> usize {
    kb.as_ref().map_or(0, |k| k.inner.schema().num_fields())
}

/// # Safety
/// `kb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edk_kb_num_patterns(kb: *const EdkKnowledgeBase) -> usize {
    kb.as_ref().map_or(0, |k| k.inner.num_patterns())
}

/// # Safety
/// `kb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edk_kb_knowledge_dim(kb: *const EdkKnowledgeBase) -> usize {
    kb.as_ref().map_or(0, |k| k.inner.knowledge_dim())
}

/// Knowledge vectors `c` of `n` instances.
///
/// `ids` holds `n * num_fields` ids, row-major; `out` receives
/// `n * knowledge_dim` values and `out_len` must equal that.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn edk_kb_query(
    kb: *const EdkKnowledgeBase,
    ids: *const u32,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> EdkStatus {
    guard(|| {
        let kb = &kb.as_ref().ok_or_else(|| null("kb"))?.inner;
        let records = records_arg(ids, n, kb.schema().num_fields())?;
        let out = out_arg(out, out_len, n * kb.knowledge_dim())?;
        if n == 0 {
            return Ok(());
        }
        for r in &records {
            r.check(kb.schema()).map_err(fail)?;
        }
        let kv = kb.query(&records).map_err(fail)?;
        out.copy_from_slice(kv.c.data());
        Ok(())
    })
}

/// Loads a trained model checkpoint into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn edk_model_open(path: *const c_char, out: *mut *mut EdkModel) -> EdkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let inner = TrainedModel::load(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(EdkModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`edk_model_open`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn edk_model_free(model: *mut EdkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Nonzero when the model must be given the knowledge base it was trained with.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edk_model_uses_knowledge(model: *const EdkModel) -> i32 {
    model.as_ref().map_or(0, |m| i32::from(m.inner.kb_version.is_some()))
}

/// Click probabilities of `n` instances given as row-major ids.
///
/// `kb` may be null for models trained without knowledge. Behavior
/// sequences are taken as empty.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn edk_model_predict(
    model: *const EdkModel,
    kb: *const EdkKnowledgeBase,
    ids: *const u32,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> EdkStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let kb = kb.as_ref().map(|k| &k.inner);
        let records = records_arg(ids, n, model.schema.num_fields())?;
        let out = out_arg(out, out_len, n)?;
        if n == 0 {
            return Ok(());
        }
        let scores = model.predict(&records, kb).map_err(fail)?;
        out.copy_from_slice(&scores);
        Ok(())
    })
}
