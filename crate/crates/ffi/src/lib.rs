//! C ABI over the `recobert` crate.
//!
//! Every function returns an [`RcbStatus`]. On failure a message is stored
//! per thread and can be read with [`rcb_last_error`]. Objects are opaque
//! handles created by `*_load`/`rcb_embed`/`rcb_rank` and released with the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use recobert::catalog::{load_annotations, load_catalog, AnnotationKey, CatalogFormat};
use recobert::encoder::checkpoint_load;
use recobert::encoder::EncoderError;
use recobert::metrics::{evaluate, EvalInputs, EvalMode};
use recobert::objectives::pair_tdm_score;
use recobert::ranker::{embed_catalog, RankError};
use recobert::tokenizer::{encode_pair, tokenize, EncodeOptions, DEFAULT_TITLE_CAP};
use recobert::{Catalog, EmbeddingStore, Error, Lambdas, Model, RankedList, Ranker, Vocabulary};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    NotFound = 5,
    Mismatch = 6,
    Panic = 99,
}

/// A checkpoint together with its vocabulary and encoding options.
pub struct RcbModel {
    model: Model,
    vocab: Vocabulary,
    opts: EncodeOptions,
}

pub struct RcbCatalog {
    catalog: Catalog,
}

pub struct RcbStore {
    store: EmbeddingStore,
}

pub struct RcbRanking {
    list: RankedList,
    ids: Vec<CString>,
}

struct Failure {
    status: RcbStatus,
    message: String,
}

impl Failure {
    fn new(status: RcbStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.is_io() {
            RcbStatus::Io
        } else {
            match &e {
                Error::Rank(RankError::UnknownSeed(_) | RankError::MissingEmbedding(_)) => {
                    RcbStatus::NotFound
                }
                Error::Rank(
                    RankError::FingerprintMismatch { .. } | RankError::DimensionMismatch { .. },
                )
                | Error::Encoder(EncoderError::VocabMismatch { .. }) => RcbStatus::Mismatch,
                _ => RcbStatus::InvalidArgument,
            }
        };
        Failure::new(status, e.to_string())
    }
}

macro_rules! impl_from_module_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::from(Error::from(e))
            }
        }
    )*};
}

impl_from_module_error!(
    recobert::catalog::CatalogError,
    recobert::tokenizer::TokenizerError,
    EncoderError,
    recobert::objectives::ObjectiveError,
    RankError,
    recobert::metrics::MetricsError
);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Runs `f`, converting errors and panics into a status code.
fn guard<F>(f: F) -> RcbStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RcbStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(&format!("panic: {msg}"));
            RcbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(RcbStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(RcbStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(RcbStatus::NullPointer, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(RcbStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn lambdas_arg(p: *const f64) -> Result<Lambdas, Failure> {
    if p.is_null() {
        return Err(Failure::new(RcbStatus::NullPointer, "lambdas is null"));
    }
    let mut values = [0.0; 4];
    values.copy_from_slice(std::slice::from_raw_parts(p, 4));
    Ok(Lambdas::new(values)?)
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message for the last failed call on this thread, or null after a
/// success. The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rcb_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint and the vocabulary it was trained with. `title_cap`
/// of 0 selects the default.
///
/// # Safety
/// `checkpoint_path` and `vocab_path` must be NUL-terminated strings and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    title_cap: usize,
    out: *mut *mut RcbModel,
) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        let ckpt = PathBuf::from(str_arg(checkpoint_path, "checkpoint_path")?);
        let vocab = Vocabulary::load(&PathBuf::from(str_arg(vocab_path, "vocab_path")?))?;
        let (model, _) = checkpoint_load(&ckpt, Some(vocab.hash()))?;
        let opts = EncodeOptions {
            max_len: model.config.max_len,
            title_cap: if title_cap == 0 { DEFAULT_TITLE_CAP } else { title_cap },
        };
        *out = Box::into_raw(Box::new(RcbModel { model, vocab, opts }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`rcb_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rcb_model_free(model: *mut RcbModel) {
    free_box(model);
}

/// Width of the pooled feature vectors.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_model_hidden(model: *const RcbModel, out: *mut usize) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ref_arg(model, "model")?.model.config.hidden;
        Ok(())
    })
}

/// Title-description match score of one pair, in [0, 1].
///
/// # Safety
/// `model` must be a live handle, `title` and `description` NUL-terminated
/// strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_tdm_score(
    model: *const RcbModel,
    title: *const c_char,
    description: *const c_char,
    out: *mut f64,
) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let seq = encode_pair(
            &tokenize(str_arg(title, "title")?),
            &tokenize(str_arg(description, "description")?),
            &m.vocab,
            m.opts,
        )?;
        *out = pair_tdm_score(&m.model, &seq)?.0;
        Ok(())
    })
}

/// Loads a JSONL or CSV catalog; the format follows the file extension.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_catalog_load(
    path: *const c_char,
    out: *mut *mut RcbCatalog,
) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let catalog = load_catalog(&path, CatalogFormat::from_path(&path))?;
        *out = Box::into_raw(Box::new(RcbCatalog { catalog }));
        Ok(())
    })
}

/// # Safety
/// `catalog` must be null or a handle from [`rcb_catalog_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rcb_catalog_free(catalog: *mut RcbCatalog) {
    free_box(catalog);
}

/// # Safety
/// `catalog` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_catalog_len(catalog: *const RcbCatalog, out: *mut usize) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ref_arg(catalog, "catalog")?.catalog.len();
        Ok(())
    })
}

/// Embeds every catalog item with `model`.
///
/// # Safety
/// `model` and `catalog` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_embed(
    model: *const RcbModel,
    catalog: *const RcbCatalog,
    out: *mut *mut RcbStore,
) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let c = ref_arg(catalog, "catalog")?;
        let store = embed_catalog(&m.model, &c.catalog, &m.vocab, m.opts, 64)?;
        *out = Box::into_raw(Box::new(RcbStore { store }));
        Ok(())
    })
}

/// # Safety
/// `store` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rcb_store_save(store: *const RcbStore, path: *const c_char) -> RcbStatus {
    guard(|| {
        let s = ref_arg(store, "store")?;
        s.store.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_store_load(path: *const c_char, out: *mut *mut RcbStore) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        let store = EmbeddingStore::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(RcbStore { store }));
        Ok(())
    })
}

/// # Safety
/// `store` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_store_len(store: *const RcbStore, out: *mut usize) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ref_arg(store, "store")?.store.len();
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle from [`rcb_embed`]/[`rcb_store_load`]
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rcb_store_free(store: *mut RcbStore) {
    free_box(store);
}

/// Ranks every other catalog item for `seed_id`. `lambdas` points to four
/// weights: description cosine, title cosine and the two cross scores.
///
/// # Safety
/// Handles must be live, `seed_id` a NUL-terminated string, `lambdas` four
/// readable doubles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_rank(
    model: *const RcbModel,
    catalog: *const RcbCatalog,
    store: *const RcbStore,
    seed_id: *const c_char,
    lambdas: *const f64,
    out: *mut *mut RcbRanking,
) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let c = ref_arg(catalog, "catalog")?;
        let s = ref_arg(store, "store")?;
        let seed = str_arg(seed_id, "seed_id")?;
        let lambdas = lambdas_arg(lambdas)?;
        let ranker = Ranker::new(&m.model, &m.vocab, &c.catalog, &s.store, m.opts)?;
        let list = ranker.rank(seed, lambdas, false)?;
        let ids = list
            .ids()
            .map(|id| CString::new(id).expect("catalog ids contain no NUL"))
            .collect();
        *out = Box::into_raw(Box::new(RcbRanking { list, ids }));
        Ok(())
    })
}

/// # Safety
/// `ranking` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_ranking_len(ranking: *const RcbRanking, out: *mut usize) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ref_arg(ranking, "ranking")?.ids.len();
        Ok(())
    })
}

/// Id and combined score at position `index` (0 is the best match). The id
/// pointer is owned by the ranking.
///
/// # Safety
/// `ranking` must be a live handle; `id` and `score` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn rcb_ranking_get(
    ranking: *const RcbRanking,
    index: usize,
    id: *mut *const c_char,
    score: *mut f64,
) -> RcbStatus {
    guard(|| {
        out_arg(id, "id")?;
        out_arg(score, "score")?;
        let r = ref_arg(ranking, "ranking")?;
        let entry = r.list.ranked.get(index).ok_or_else(|| {
            Failure::new(
                RcbStatus::InvalidArgument,
                format!("index {index} out of range for {} entries", r.ids.len()),
            )
        })?;
        *id = r.ids[index].as_ptr();
        *score = entry.total;
        Ok(())
    })
}

/// # Safety
/// `ranking` must be null or a handle from [`rcb_rank`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rcb_ranking_free(ranking: *mut RcbRanking) {
    free_box(ranking);
}

/// Evaluates the whole catalog against an annotation file and returns the
/// report as a JSON string, to be released with [`rcb_string_free`].
///
/// # Safety
/// Handles must be live, `annotations_path` a NUL-terminated string,
/// `lambdas` four readable doubles, `ks` `n_ks` readable values and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcb_evaluate_json(
    model: *const RcbModel,
    catalog: *const RcbCatalog,
    store: *const RcbStore,
    annotations_path: *const c_char,
    lambdas: *const f64,
    ks: *const usize,
    n_ks: usize,
    out: *mut *mut c_char,
) -> RcbStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let c = ref_arg(catalog, "catalog")?;
        let s = ref_arg(store, "store")?;
        let lambdas = lambdas_arg(lambdas)?;
        let ks: Vec<usize> = if n_ks == 0 {
            Vec::new()
        } else if ks.is_null() {
            return Err(Failure::new(RcbStatus::NullPointer, "ks is null"));
        } else {
            std::slice::from_raw_parts(ks, n_ks).to_vec()
        };
        let path = PathBuf::from(str_arg(annotations_path, "annotations_path")?);
        let annotations = load_annotations(&path, &c.catalog, AnnotationKey::Id)?.annotations;
        let inputs = EvalInputs {
            model: &m.model,
            vocab: &m.vocab,
            catalog: &c.catalog,
            store: &s.store,
            annotations: &annotations,
            opts: m.opts,
        };
        let (report, _) = evaluate(&inputs, lambdas, &ks, EvalMode::Full)?;
        *out = CString::new(report.to_json())
            .expect("JSON contains no NUL")
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rcb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_maps_panics_and_clears_errors() {
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let status = guard(|| panic!("boom"));
        std::panic::set_hook(prev);
        assert_eq!(status, RcbStatus::Panic);
        let msg = unsafe { CStr::from_ptr(rcb_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
        assert_eq!(guard(|| Ok(())), RcbStatus::Ok);
        assert!(rcb_last_error().is_null());
    }

    #[test]
    fn interior_nul_in_message_is_replaced() {
        let status = guard(|| Err(Failure::new(RcbStatus::InvalidArgument, "a\0b")));
        assert_eq!(status, RcbStatus::InvalidArgument);
        let msg = unsafe { CStr::from_ptr(rcb_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "a b");
    }
}
