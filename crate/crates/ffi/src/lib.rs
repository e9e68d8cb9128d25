//! C ABI over the emerg engine.
//!
//! Every fallible function returns an [`EmergStatus`]. On failure the message
//! is kept per thread and read with [`emerg_last_error_message`]. Models are
//! opaque handles created by [`emerg_model_load`] and released with
//! [`emerg_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use emerg::cli::{cmd_export_graph, RunConfig, Workspace};
use emerg::dataio::{FeatureKind, FeatureValue, RawInteraction};
use emerg::diffcore::ParamStore;
use emerg::orderoracle::{check_prop1, Mode, Pattern};
use emerg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmergStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Bad configuration, schema, data or checkpoint.
    Validation = 3,
    Runtime = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmergMode {
    Emerg = 0,
    Residual = 1,
}

/// A trained model: run configuration, data and θ.
pub struct EmergModel {
    ws: Workspace,
    theta: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(EmergStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = if e.is_validation() {
            EmergStatus::Validation
        } else {
            EmergStatus::Runtime
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EmergStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EmergStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmergStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside emerg");
            EmergStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail(EmergStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| invalid(format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(EmergStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(EmergStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn emerg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a run configuration and a θ checkpoint written by `emerg train`.
///
/// # Safety
/// `config_path` and `checkpoint_path` must be NUL-terminated strings; `out`
/// must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn emerg_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut EmergModel,
) -> EmergStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = RunConfig::load(path_arg(config_path, "config_path")?)?;
        let ws = Workspace::open(config)?;
        let theta = ws.load_theta(path_arg(checkpoint_path, "checkpoint_path")?)?;
        *out = Box::into_raw(Box::new(EmergModel { ws, theta }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`emerg_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emerg_model_free(model: *mut EmergModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of features, i.e. the length of a row and the side of the
/// adjacency matrices.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn emerg_model_n_features(model: *const EmergModel, out: *mut usize) -> EmergStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).ws.engine.nodes();
        Ok(())
    })
}

fn to_row(model: &EmergModel, values: &[f64]) -> Result<RawInteraction, Fail> {
    let schema = model.ws.engine.schema();
    if values.len() != schema.n_features() {
        return Err(invalid(format!("{} values for {} features", values.len(), schema.n_features())));
    }
    let mut row = Vec::with_capacity(values.len());
    for (m, &x) in values.iter().enumerate() {
        let f = schema.feature(m);
        let v = match f.kind {
            FeatureKind::Continuous => FeatureValue::Continuous(x),
            FeatureKind::Single if x >= 0.0 && x.fract() == 0.0 && (x as usize) < f.vocab => FeatureValue::Single(x as u32),
            FeatureKind::Single => return Err(invalid(format!("`{}` = {x} is not a valid index", f.name))),
            FeatureKind::Multi => return Err(invalid(format!("multi-valued feature `{}` is not supported here", f.name))),
        };
        row.push(v);
    }
    Ok(RawInteraction {
        values: row,
        label: 0,
        timestamp: 0,
    })
}

fn cold_phi(model: &EmergModel, row: &RawInteraction) -> Result<emerg::metatrain::ItemPhi, Fail> {
    let n_item = model.ws.engine.schema().n_item();
    Ok(model
        .ws
        .engine
        .cold_phi(&model.theta, row.item(), &row.values[..n_item])?)
}

/// Cold-start click probability of one instance. `values` holds one number
/// per feature in schema order: vocabulary indices for categorical features,
/// raw values for continuous ones. The item's features are taken from the row.
///
/// # Safety
/// `values` must point to `n_values` doubles; `model` must be live; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn emerg_model_predict_row(
    model: *const EmergModel,
    values: *const f64,
    n_values: usize,
    out: *mut f64,
) -> EmergStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let model = &*model;
        let row = to_row(model, slice_arg(values, n_values, "values")?)?;
        let phi = cold_phi(model, &row)?;
        *out = model.ws.engine.score(&model.theta, &phi, &[&row])?[0];
        Ok(())
    })
}

/// Cold-start adjacency `A^(layer)` (1-based) of the item described by
/// `values` (a full row as in [`emerg_model_predict_row`]), written row-major
/// into `out`, which must hold `n * n` doubles for `n` features.
///
/// # Safety
/// Pointers as described; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn emerg_model_adjacency(
    model: *const EmergModel,
    values: *const f64,
    n_values: usize,
    layer: usize,
    out: *mut f64,
    out_len: usize,
) -> EmergStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let model = &*model;
        let row = to_row(model, slice_arg(values, n_values, "values")?)?;
        let stack = model.ws.engine.stack(&cold_phi(model, &row)?)?;
        if layer == 0 || layer > stack.layers() {
            return Err(invalid(format!("layer {layer} outside 1..={}", stack.layers())));
        }
        let a = &stack.a[layer - 1];
        if out_len != a.data().len() {
            return Err(invalid(format!("buffer of {out_len} for {} entries", a.data().len())));
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(a.data());
        Ok(())
    })
}

/// Writes the item's adjacency CSVs into `out_dir`; with `warmup`, also the
/// stacks after warm-up phases A, B and C.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn emerg_model_export_graph(
    model: *const EmergModel,
    item: u32,
    out_dir: *const c_char,
    warmup: bool,
) -> EmergStatus {
    guard(|| {
        non_null(model, "model")?;
        let model = &*model;
        let dir = path_arg(out_dir, "out_dir")?;
        cmd_export_graph(&model.ws, &model.theta, dir, item, warmup, false)?;
        Ok(())
    })
}

/// Rank-based AUC; ties share their average rank. Single-class input fails.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn emerg_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> EmergStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = emerg::eval::auc(slice_arg(scores, n, "scores")?, slice_arg(labels, n, "labels")?)?;
        Ok(())
    })
}

/// F1 of `score >= threshold` predictions.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn emerg_f1(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> EmergStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = emerg::eval::f1(slice_arg(scores, n, "scores")?, slice_arg(labels, n, "labels")?, threshold)?;
        Ok(())
    })
}

/// Symbolic order check on one support pattern (`features * features`
/// row-major bytes, nonzero = edge) reused by every layer. `mode` is an
/// [`EmergMode`] value. `holds` receives
/// whether each layer-`l` state has only degree-`l + 1` monomials.
///
/// # Safety
/// `pattern` must point to `features * features` bytes; `holds` writable.
#[no_mangle]
pub unsafe extern "C" fn emerg_check_prop1(
    features: usize,
    layers: usize,
    pattern: *const u8,
    mode: u32,
    holds: *mut bool,
) -> EmergStatus {
    guard(|| {
        non_null(holds, "holds")?;
        let cells = slice_arg(pattern, features * features, "pattern")?;
        let p = Pattern::new(features, cells.iter().map(|c| *c != 0).collect())?;
        let mode = match mode {
            m if m == EmergMode::Emerg as u32 => Mode::Emerg,
            m if m == EmergMode::Residual as u32 => Mode::Residual,
            m => return Err(invalid(format!("unknown mode {m}"))),
        };
        *holds = check_prop1(features, layers, &[p], mode)?.0;
        Ok(())
    })
}
