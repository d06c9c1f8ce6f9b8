//! C ABI for the mufasa recommender.
//!
//! Opaque handles wrap the model and catalog; every call returns a status
//! code and leaves a message for [`mufasa_last_error`] on failure. The
//! header is generated into `include/mufasa.h` at build time.
//!
//! Handles are not thread-safe; callers must not share one handle across
//! threads without external synchronization.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use mufasa::data::io::load_catalog;
use mufasa::data::Catalog;
use mufasa::error::Error;
use mufasa::eval::Ranker;
use mufasa::gradcheck::{run_gradient_checks, GradCheckOptions};
use mufasa::model::Model;
use mufasa::tensor::Tensor;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MufasaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidConfig = 2,
    DataError = 3,
    NumericError = 4,
    BufferTooSmall = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> MufasaStatus {
    match err.category() {
        "config" => MufasaStatus::InvalidConfig,
        "data" => MufasaStatus::DataError,
        _ => MufasaStatus::NumericError,
    }
}

fn fail(err: &Error) -> MufasaStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Opaque trained-model handle.
pub struct MufasaModel {
    model: Model,
}

/// Opaque catalog handle; item ids are cached as C strings so id pointers
/// stay valid until the handle is freed.
pub struct MufasaCatalog {
    catalog: Catalog,
    ids: Vec<CString>,
}

/// Crate version as a static C string.
#[no_mangle]
pub extern "C" fn mufasa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mufasa_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn path_from(ptr_: *const c_char) -> Result<String, MufasaStatus> {
    if ptr_.is_null() {
        set_error("null path");
        return Err(MufasaStatus::NullArgument);
    }
    match CStr::from_ptr(ptr_).to_str() {
        Ok(s) => Ok(s.to_string()),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(MufasaStatus::InvalidConfig)
        }
    }
}

/// Load a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mufasa_model_load(
    path: *const c_char,
    out: *mut *mut MufasaModel,
) -> MufasaStatus {
    if out.is_null() {
        set_error("null output pointer");
        return MufasaStatus::NullArgument;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match Model::load(Path::new(&path)) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(MufasaModel { model }));
            MufasaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// # Safety
/// `handle` must come from [`mufasa_model_load`] and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn mufasa_model_free(handle: *mut MufasaModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Embedding dimension of a loaded model.
///
/// # Safety
/// `handle` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn mufasa_model_dim(handle: *const MufasaModel) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).model.cfg.dim
}

/// Load an item file (line-delimited records).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mufasa_catalog_load(
    path: *const c_char,
    out: *mut *mut MufasaCatalog,
) -> MufasaStatus {
    if out.is_null() {
        set_error("null output pointer");
        return MufasaStatus::NullArgument;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_catalog(Path::new(&path)) {
        Ok(catalog) => {
            let ids = catalog
                .items()
                .iter()
                .map(|i| CString::new(i.item_id.as_str()).unwrap_or_default())
                .collect();
            *out = Box::into_raw(Box::new(MufasaCatalog { catalog, ids }));
            MufasaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// # Safety
/// `handle` must come from [`mufasa_catalog_load`] and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn mufasa_catalog_free(handle: *mut MufasaCatalog) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of items in a loaded catalog.
///
/// # Safety
/// `handle` must be a live catalog handle.
#[no_mangle]
pub unsafe extern "C" fn mufasa_catalog_len(handle: *const MufasaCatalog) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).catalog.len()
}

/// Item id at a catalog index, or NULL when out of range. The pointer is
/// owned by the catalog handle.
///
/// # Safety
/// `handle` must be a live catalog handle.
#[no_mangle]
pub unsafe extern "C" fn mufasa_catalog_item_id(
    handle: *const MufasaCatalog,
    index: usize,
) -> *const c_char {
    if handle.is_null() {
        return ptr::null();
    }
    let catalog: &MufasaCatalog = &*handle;
    match catalog.ids.get(index) {
        Some(id) => id.as_ptr(),
        None => ptr::null(),
    }
}

unsafe fn resolve_context(
    catalog: &MufasaCatalog,
    context_ids: *const *const c_char,
    context_len: usize,
) -> Result<Vec<usize>, MufasaStatus> {
    if context_ids.is_null() || context_len == 0 {
        set_error("context must contain at least one item id");
        return Err(MufasaStatus::NullArgument);
    }
    let mut indices = Vec::with_capacity(context_len);
    for i in 0..context_len {
        let p = *context_ids.add(i);
        if p.is_null() {
            set_error(&format!("context id {i} is null"));
            return Err(MufasaStatus::NullArgument);
        }
        let id = match CStr::from_ptr(p).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error(&format!("context id {i} is not valid UTF-8"));
                return Err(MufasaStatus::InvalidConfig);
            }
        };
        match catalog.catalog.index_of(id) {
            Some(idx) => indices.push(idx),
            None => {
                set_error(&format!("unknown item id `{id}`"));
                return Err(MufasaStatus::DataError);
            }
        }
    }
    Ok(indices)
}

/// Compute the user embedding for a chronological context of item ids and
/// write it into `out_embedding` (capacity `out_len >= model dim`).
///
/// # Safety
/// All pointers must be live; `context_ids` must hold `context_len` valid
/// NUL-terminated strings; `out_embedding` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mufasa_user_embedding(
    model: *const MufasaModel,
    catalog: *const MufasaCatalog,
    context_ids: *const *const c_char,
    context_len: usize,
    out_embedding: *mut f64,
    out_len: usize,
) -> MufasaStatus {
    if model.is_null() || catalog.is_null() || out_embedding.is_null() {
        set_error("null handle or buffer");
        return MufasaStatus::NullArgument;
    }
    let model = &(*model).model;
    let catalog = &*catalog;
    if out_len < model.cfg.dim {
        set_error(&format!(
            "embedding buffer holds {out_len} doubles, need {}",
            model.cfg.dim
        ));
        return MufasaStatus::BufferTooSmall;
    }
    let context = match resolve_context(catalog, context_ids, context_len) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let rows: Vec<Vec<f64>> = match context
        .iter()
        .map(|&i| model.fused_item(&catalog.catalog, i).map(Tensor::into_data))
        .collect::<mufasa::Result<Vec<_>>>()
    {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let seq = match Tensor::from_rows(&rows) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    match model.user_embedding(&seq) {
        Ok(emb) => {
            ptr::copy_nonoverlapping(emb.data().as_ptr(), out_embedding, model.cfg.dim);
            MufasaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Rank the whole catalog for a context and write the top-k catalog
/// indices and scores into the caller's buffers (capacity `k` each).
/// `out_written` receives the number of entries written (min(k, catalog)).
///
/// # Safety
/// All pointers must be live; `out_indices` and `out_scores` must hold
/// `k` elements; `context_ids` must hold `context_len` valid strings.
#[no_mangle]
pub unsafe extern "C" fn mufasa_rank_top_k(
    model: *const MufasaModel,
    catalog: *const MufasaCatalog,
    context_ids: *const *const c_char,
    context_len: usize,
    k: usize,
    out_indices: *mut usize,
    out_scores: *mut f64,
    out_written: *mut usize,
) -> MufasaStatus {
    if model.is_null()
        || catalog.is_null()
        || out_indices.is_null()
        || out_scores.is_null()
        || out_written.is_null()
    {
        set_error("null handle or buffer");
        return MufasaStatus::NullArgument;
    }
    if k == 0 {
        set_error("k must be >= 1");
        return MufasaStatus::InvalidConfig;
    }
    let model = &(*model).model;
    let catalog = &*catalog;
    let context = match resolve_context(catalog, context_ids, context_len) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let ranker = match Ranker::new(model, &catalog.catalog) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    match ranker.rank("ffi", &context) {
        Ok(ranked) => {
            let n = k.min(ranked.ranked.len());
            for (slot, (idx, score)) in ranked.ranked.iter().take(n).enumerate() {
                *out_indices.add(slot) = *idx;
                *out_scores.add(slot) = *score;
            }
            *out_written = n;
            MufasaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Run the finite-difference gradient suite; `Ok` means every component
/// passed at the given tolerance.
#[no_mangle]
pub extern "C" fn mufasa_gradcheck(seed: u64, tolerance: f64) -> MufasaStatus {
    let opts = GradCheckOptions {
        seed,
        tolerance,
        ..GradCheckOptions::default()
    };
    match run_gradient_checks(&opts) {
        Ok(report) if report.all_passed() => MufasaStatus::Ok,
        Ok(report) => {
            set_error(&format!("gradient check failed:\n{}", report.text_table()));
            MufasaStatus::NumericError
        }
        Err(e) => fail(&e),
    }
}
