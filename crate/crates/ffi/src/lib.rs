//! C ABI for the metagnn library: opaque handles, integer status codes,
//! and a thread-local last-error message. All functions are
//! panic-safe; a caught panic reports `MG_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use metagnn::data::{
    load_dataset, save_dataset, split_dataset, synth_generate, zscore_fit, Dataset, Normalizer,
    SynthSpec,
};
use metagnn::eval::{evaluate, EvalConfig, Predictor};
use metagnn::layers::{
    load_model, model_forward, model_init, save_model, ArchKind, Architecture, GraphBatch, Mode,
    ModelParams,
};
use metagnn::meta::{reptile_train, MetaConfig, MetaError};
use metagnn::tensor::Tape;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgStatus {
    MgStatusOk = 0,
    /// Null handle or otherwise unusable argument.
    MgStatusNullArgument = 1,
    /// Configuration or data validation failure.
    MgStatusValidation = 2,
    /// Inner-loop divergence during training or adaptation.
    MgStatusDivergence = 3,
    /// File system failure.
    MgStatusIo = 4,
    /// Unexpected internal failure (caught panic).
    MgStatusInternal = 5,
}

use MgStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

fn status_of_meta(e: &MetaError) -> MgStatus {
    match e {
        MetaError::Diverged { .. } => MgStatusDivergence,
        MetaError::Io(_) => MgStatusIo,
        _ => MgStatusValidation,
    }
}

fn guard<F: FnOnce() -> MgStatus>(f: F) -> MgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            MgStatusInternal
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Option<&'a Path> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok().map(Path::new)
}

/// Opaque dataset handle.
pub struct MgDataset {
    ds: Dataset,
}

/// Opaque model handle. Carries the normalization and split settings
/// established at training time, when available.
pub struct MgModel {
    mp: ModelParams,
    norm: Option<Normalizer>,
    split: Option<(f64, u64)>,
}

// ---------------------------------------------------------------------------
// Dataset

/// Load a JSONL dataset; returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_load(path: *const c_char) -> *mut MgDataset {
    let Some(path) = path_arg(path) else {
        set_error("null or invalid path");
        return std::ptr::null_mut();
    };
    match catch_unwind(|| load_dataset(path)) {
        Ok(Ok(ds)) => Box::into_raw(Box::new(MgDataset { ds })),
        Ok(Err(e)) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

/// Generate a synthetic dataset; returns null on failure.
#[no_mangle]
pub extern "C" fn mg_dataset_synth(
    num_graphs: usize,
    nodes_min: usize,
    nodes_max: usize,
    d_node: usize,
    d_edge: usize,
    num_tasks: usize,
    with_coords: bool,
    seed: u64,
) -> *mut MgDataset {
    let spec = SynthSpec { num_graphs, nodes_min, nodes_max, d_node, d_edge, num_tasks, with_coords };
    match catch_unwind(|| synth_generate(&spec, seed)) {
        Ok(Ok(ds)) => Box::into_raw(Box::new(MgDataset { ds })),
        Ok(Err(e)) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

/// Write a dataset as JSONL.
///
/// # Safety
/// `ds` must be a live handle from this library; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_save(ds: *const MgDataset, path: *const c_char) -> MgStatus {
    let (Some(ds), Some(path)) = (ds.as_ref(), path_arg(path)) else {
        set_error("null dataset or path");
        return MgStatusNullArgument;
    };
    guard(|| match save_dataset(&ds.ds, path) {
        Ok(()) => MgStatusOk,
        Err(e) => {
            set_error(&e.to_string());
            MgStatusIo
        }
    })
}

/// Number of graphs, or 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_num_graphs(ds: *const MgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.ds.graphs.len())
}

/// Number of regression tasks, or 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_num_tasks(ds: *const MgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.ds.num_tasks())
}

/// Release a dataset handle; null is a no-op.
///
/// # Safety
/// `ds` must be a handle from this library, released at most once.
#[no_mangle]
pub unsafe extern "C" fn mg_dataset_free(ds: *mut MgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---------------------------------------------------------------------------
// Model

/// Initialize a model. `arch` is one of "gcn", "gat", "mpnn", "egnn".
/// Returns null on failure.
///
/// # Safety
/// `arch` must be a valid NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn mg_model_init(
    arch: *const c_char,
    d_node: usize,
    d_edge: usize,
    hidden_dim: usize,
    seed: u64,
) -> *mut MgModel {
    if arch.is_null() {
        set_error("null architecture name");
        return std::ptr::null_mut();
    }
    let Ok(name) = CStr::from_ptr(arch).to_str() else {
        set_error("architecture name is not UTF-8");
        return std::ptr::null_mut();
    };
    let kind = match ArchKind::parse(name) {
        Ok(k) => k,
        Err(e) => {
            set_error(&e.to_string());
            return std::ptr::null_mut();
        }
    };
    let mut a = Architecture::new(kind, d_node, d_edge);
    if hidden_dim > 0 {
        a.hidden_dim = hidden_dim;
    }
    match catch_unwind(|| model_init(a, seed)) {
        Ok(Ok(mp)) => Box::into_raw(Box::new(MgModel { mp, norm: None, split: None })),
        Ok(Err(e)) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

/// Load a model JSON document; returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn mg_model_load(path: *const c_char) -> *mut MgModel {
    let Some(path) = path_arg(path) else {
        set_error("null or invalid path");
        return std::ptr::null_mut();
    };
    match catch_unwind(|| load_model(path)) {
        Ok(Ok((mp, hp))) => {
            let norm = match (hp.get("norm_mean").and_then(|v| v.as_f64()), hp.get("norm_std").and_then(|v| v.as_f64())) {
                (Some(mean), Some(std)) if std > 0.0 => Some(Normalizer { mean, std }),
                _ => None,
            };
            let split = match (hp.get("train_frac").and_then(|v| v.as_f64()), hp.get("split_seed").and_then(|v| v.as_u64())) {
                (Some(f), Some(s)) => Some((f, s)),
                _ => None,
            };
            Box::into_raw(Box::new(MgModel { mp, norm, split }))
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

/// Save a model as JSON, embedding its normalization and split settings
/// when present.
///
/// # Safety
/// `model` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn mg_model_save(model: *const MgModel, path: *const c_char) -> MgStatus {
    let (Some(m), Some(path)) = (model.as_ref(), path_arg(path)) else {
        set_error("null model or path");
        return MgStatusNullArgument;
    };
    guard(|| {
        let mut hp = serde_json::Map::new();
        if let Some(n) = &m.norm {
            hp.insert("norm_mean".into(), n.mean.into());
            hp.insert("norm_std".into(), n.std.into());
        }
        if let Some((f, s)) = m.split {
            hp.insert("train_frac".into(), f.into());
            hp.insert("split_seed".into(), s.into());
        }
        match save_model(&m.mp, &serde_json::Value::Object(hp), path) {
            Ok(()) => MgStatusOk,
            Err(e) => {
                set_error(&e.to_string());
                MgStatusIo
            }
        }
    })
}

/// Total number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mg_model_num_params(model: *const MgModel) -> usize {
    model.as_ref().map_or(0, |m| m.mp.params.num_scalars())
}

/// Release a model handle; null is a no-op.
///
/// # Safety
/// `model` must be a handle from this library, released at most once.
#[no_mangle]
pub unsafe extern "C" fn mg_model_free(model: *mut MgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------------------
// Training, prediction, evaluation

/// Meta-train the model in place with Reptile over all tasks. The
/// train/test split and the pooled z-score normalizer are derived here
/// and retained in the handle.
///
/// # Safety
/// `model` and `ds` must be live handles from this library.
#[no_mangle]
pub unsafe extern "C" fn mg_train_reptile(
    model: *mut MgModel,
    ds: *const MgDataset,
    alpha: f64,
    beta: f64,
    k: usize,
    support_size: usize,
    epochs: usize,
    train_frac: f64,
    seed: u64,
) -> MgStatus {
    let (Some(m), Some(d)) = (model.as_mut(), ds.as_ref()) else {
        set_error("null model or dataset");
        return MgStatusNullArgument;
    };
    guard(|| {
        let cfg = MetaConfig {
            inner_lr: alpha,
            meta_lr: beta,
            inner_steps: k,
            support_size,
            epochs,
            seed,
        };
        let (train_split, _) = match split_dataset(&d.ds, train_frac, seed) {
            Ok(s) => s,
            Err(e) => {
                set_error(&e.to_string());
                return MgStatusValidation;
            }
        };
        let norm = match zscore_fit(&d.ds, &train_split) {
            Ok(n) => n,
            Err(e) => {
                set_error(&e.to_string());
                return MgStatusValidation;
            }
        };
        let targets: Vec<usize> = (0..d.ds.num_tasks()).collect();
        match reptile_train(&m.mp, &d.ds, &targets, &train_split, &norm, &cfg) {
            Ok((trained, _)) => {
                m.mp = trained;
                m.norm = Some(norm);
                m.split = Some((train_frac, seed));
                MgStatusOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of_meta(&e)
            }
        }
    })
}

/// Predict the (denormalized, when a normalizer is attached) target for
/// one graph; writes it to `out`.
///
/// # Safety
/// `model` and `ds` must be live handles; `out` a valid f64 pointer.
#[no_mangle]
pub unsafe extern "C" fn mg_model_predict(
    model: *const MgModel,
    ds: *const MgDataset,
    graph_index: usize,
    out: *mut f64,
) -> MgStatus {
    let (Some(m), Some(d)) = (model.as_ref(), ds.as_ref()) else {
        set_error("null model or dataset");
        return MgStatusNullArgument;
    };
    if out.is_null() {
        set_error("null output pointer");
        return MgStatusNullArgument;
    }
    if graph_index >= d.ds.graphs.len() {
        set_error("graph index out of range");
        return MgStatusValidation;
    }
    guard(|| {
        let batch = GraphBatch::from_graphs(&d.ds, &[graph_index], &[0.0]);
        let mut tape = Tape::new();
        let bound = m.mp.params.bind(&mut tape);
        match model_forward(&mut tape, &m.mp, &bound, &batch, Mode::Eval) {
            Ok((preds, _)) => {
                let z = tape.data(preds)[0];
                *out = m.norm.map_or(z, |n| n.invert(z));
                MgStatusOk
            }
            Err(e) => {
                set_error(&e.to_string());
                MgStatusValidation
            }
        }
    })
}

/// K-shot evaluation on one task over the stored test split. Writes the
/// mean query MSE before adaptation to `out_pre` and after `k` steps to
/// `out_post`.
///
/// # Safety
/// `model` and `ds` must be live handles; `out_pre`/`out_post` valid
/// f64 pointers.
#[no_mangle]
pub unsafe extern "C" fn mg_eval_kshot(
    model: *const MgModel,
    ds: *const MgDataset,
    target: usize,
    alpha: f64,
    k: usize,
    support_size: usize,
    trials: usize,
    seed: u64,
    out_pre: *mut f64,
    out_post: *mut f64,
) -> MgStatus {
    let (Some(m), Some(d)) = (model.as_ref(), ds.as_ref()) else {
        set_error("null model or dataset");
        return MgStatusNullArgument;
    };
    if out_pre.is_null() || out_post.is_null() {
        set_error("null output pointer");
        return MgStatusNullArgument;
    }
    let (Some(norm), Some((frac, split_seed))) = (m.norm, m.split) else {
        set_error("model has no training split; train or load a trained model first");
        return MgStatusValidation;
    };
    guard(|| {
        let test_split = match split_dataset(&d.ds, frac, split_seed) {
            Ok((_, t)) => t,
            Err(e) => {
                set_error(&e.to_string());
                return MgStatusValidation;
            }
        };
        let cfg = EvalConfig { alpha, k, support_size, trials, seed };
        match evaluate(&Predictor::Single(m.mp.clone()), &d.ds, &[target], &test_split, &norm, &cfg)
        {
            Ok(stats) => {
                *out_pre = stats[0].mean[0];
                *out_post = stats[0].mean[k];
                MgStatusOk
            }
            Err(e) => {
                set_error(&e.to_string());
                MgStatusValidation
            }
        }
    })
}
