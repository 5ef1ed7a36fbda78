//! C ABI for the setfair toolkit.
//!
//! Datasets and predictors are opaque handles created and destroyed here;
//! every fallible call returns an [`SfStatus`] and leaves a human-readable
//! message retrievable with [`sf_last_error_message`]. Strings returned by
//! this library are owned by the caller and must be released with
//! [`sf_string_free`].
//!
//! The header `include/setfair.h` is generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use setfair::calibration::{
    calibrate_avgk, calibrate_marginal, calibrate_mondrian, conformal_quantile, SetPredictor,
};
use setfair::data::{load_dataset, FileFormat, LabeledDataset};
use setfair::error::Error;
use setfair::scores::{ScoreConfig, UMode};
use setfair::setpred::{predict_batch, write_sets_csv, PredictOptions};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A file could not be parsed.
    Parse = 3,
    /// Data violated an invariant.
    Validation = 4,
    /// Calibration failed.
    Calibration = 5,
    /// An argument was outside its domain.
    Parameter = 6,
    /// Set prediction failed.
    Prediction = 7,
    Io = 8,
    Internal = 9,
}

/// Opaque dataset handle.
pub struct SfDataset(LabeledDataset);

/// Opaque predictor handle.
pub struct SfPredictor(SetPredictor);

/// Score-function selector for the C surface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfScoreKind {
    Lac = 0,
    Aps = 1,
    Raps = 2,
    Saps = 3,
}

/// Score-function configuration for the C surface. `fixed_u` pins the
/// randomization term to 1 (deterministic scores).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SfScoreConfig {
    pub kind: SfScoreKind,
    pub temperature: f64,
    pub lambda: f64,
    pub k_reg: usize,
    pub randomized: bool,
    pub fixed_u: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).ok();
    });
}

fn status_of(err: &Error) -> SfStatus {
    match err {
        Error::Parse { .. } => SfStatus::Parse,
        Error::Validation(_) => SfStatus::Validation,
        Error::Split(_) => SfStatus::Validation,
        Error::Calibration(_) => SfStatus::Calibration,
        Error::Parameter(_) | Error::Config(_) => SfStatus::Parameter,
        Error::Prediction(_) => SfStatus::Prediction,
        Error::Audit(_) | Error::Simulation(_) | Error::Inference(_) => SfStatus::Validation,
        Error::Io(_) => SfStatus::Io,
        Error::Internal(_) => SfStatus::Internal,
    }
}

fn report(err: Error) -> SfStatus {
    let status = status_of(&err);
    set_last_error(&err.to_string());
    status
}

/// Run `f`, translating errors and panics into status codes.
fn guarded(f: impl FnOnce() -> Result<SfStatus, Error>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(err)) => report(err),
        Err(_) => {
            set_last_error("panic inside setfair-ffi");
            SfStatus::Internal
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn cstr<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, SfStatus> {
    if ptr.is_null() {
        set_last_error(&format!("{name} is null"));
        return Err(SfStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error(&format!("{name} is not valid UTF-8"));
        SfStatus::InvalidUtf8
    })
}

fn score_config_from(cfg: &SfScoreConfig) -> ScoreConfig {
    let kind = match cfg.kind {
        SfScoreKind::Lac => setfair::scores::ScoreKind::Lac,
        SfScoreKind::Aps => setfair::scores::ScoreKind::Aps,
        SfScoreKind::Raps => setfair::scores::ScoreKind::Raps,
        SfScoreKind::Saps => setfair::scores::ScoreKind::Saps,
    };
    ScoreConfig {
        kind,
        temperature: cfg.temperature,
        lambda: cfg.lambda,
        k_reg: cfg.k_reg,
        randomized: cfg.randomized,
        u_mode: if cfg.fixed_u {
            UMode::FixedOne
        } else {
            UMode::Seeded
        },
    }
}

/// Message for the most recent error on this thread, or null when none.
/// The caller owns the string; free it with [`sf_string_free`].
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by a setfair-ffi call and not freed before.
#[no_mangle]
pub unsafe extern "C" fn sf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a dataset from `path`. `format` is `"csv"` or `"jsonl"`.
///
/// # Safety
/// `path` and `format` must be valid NUL-terminated strings; `out` must be
/// a valid pointer. On success `*out` owns the dataset; free it with
/// [`sf_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn sf_dataset_load(
    path: *const c_char,
    format: *const c_char,
    out: *mut *mut SfDataset,
) -> SfStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("out is null");
            return Ok(SfStatus::NullPointer);
        }
        let path = match cstr(path, "path") {
            Ok(s) => s,
            Err(status) => return Ok(status),
        };
        let format_str = match cstr(format, "format") {
            Ok(s) => s,
            Err(status) => return Ok(status),
        };
        let format: FileFormat = format_str.parse()?;
        let ds = load_dataset(Path::new(path), format)?;
        *out = Box::into_raw(Box::new(SfDataset(ds)));
        Ok(SfStatus::Ok)
    })
}

/// # Safety
/// `ds` must be null or a handle from [`sf_dataset_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_dataset_free(ds: *mut SfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of records; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sf_dataset_len(ds: *const SfDataset) -> usize {
    ds.as_ref().map(|d| d.0.len()).unwrap_or(0)
}

/// Class count `m`; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sf_dataset_num_classes(ds: *const SfDataset) -> usize {
    ds.as_ref().map(|d| d.0.num_classes()).unwrap_or(0)
}

/// Group count; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sf_dataset_num_groups(ds: *const SfDataset) -> usize {
    ds.as_ref().map(|d| d.0.num_groups()).unwrap_or(0)
}

unsafe fn calibrate_common(
    cal: *const SfDataset,
    out: *mut *mut SfPredictor,
    f: impl FnOnce(&LabeledDataset) -> Result<SetPredictor, Error>,
) -> SfStatus {
    if out.is_null() {
        set_last_error("out is null");
        return SfStatus::NullPointer;
    }
    let Some(cal) = cal.as_ref() else {
        set_last_error("cal is null");
        return SfStatus::NullPointer;
    };
    match f(&cal.0) {
        Ok(pred) => {
            *out = Box::into_raw(Box::new(SfPredictor(pred)));
            SfStatus::Ok
        }
        Err(err) => report(err),
    }
}

/// Calibrate a marginal conformal predictor on `cal`.
///
/// # Safety
/// `cal` must be a live dataset handle, `cfg` a valid pointer, `out` a
/// valid pointer. On success `*out` owns the predictor.
#[no_mangle]
pub unsafe extern "C" fn sf_calibrate_marginal(
    cal: *const SfDataset,
    cfg: *const SfScoreConfig,
    alpha: f64,
    seed: u64,
    out: *mut *mut SfPredictor,
) -> SfStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_last_error("cfg is null");
            return Ok(SfStatus::NullPointer);
        };
        let score_cfg = score_config_from(cfg);
        Ok(calibrate_common(cal, out, |ds| {
            calibrate_marginal(ds, &score_cfg, alpha, seed)
        }))
    })
}

/// Calibrate a Mondrian (group-conditional) predictor on `cal`.
///
/// # Safety
/// As [`sf_calibrate_marginal`].
#[no_mangle]
pub unsafe extern "C" fn sf_calibrate_mondrian(
    cal: *const SfDataset,
    cfg: *const SfScoreConfig,
    alpha: f64,
    min_group_n: usize,
    seed: u64,
    out: *mut *mut SfPredictor,
) -> SfStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_last_error("cfg is null");
            return Ok(SfStatus::NullPointer);
        };
        let score_cfg = score_config_from(cfg);
        Ok(calibrate_common(cal, out, |ds| {
            calibrate_mondrian(ds, &score_cfg, alpha, min_group_n, seed)
        }))
    })
}

/// Calibrate an avg-k predictor on `cal`.
///
/// # Safety
/// As [`sf_calibrate_marginal`].
#[no_mangle]
pub unsafe extern "C" fn sf_calibrate_avgk(
    cal: *const SfDataset,
    k: f64,
    seed: u64,
    out: *mut *mut SfPredictor,
) -> SfStatus {
    guarded(|| Ok(calibrate_common(cal, out, |ds| calibrate_avgk(ds, k, seed))))
}

/// # Safety
/// `pred` must be null or a live predictor handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_predictor_free(pred: *mut SfPredictor) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// Method name (`"marginal"`, `"mondrian"`, `"avgk"`); null for a null
/// handle. Free with [`sf_string_free`].
///
/// # Safety
/// `pred` must be null or a live predictor handle.
#[no_mangle]
pub unsafe extern "C" fn sf_predictor_method(pred: *const SfPredictor) -> *mut c_char {
    match pred.as_ref() {
        Some(p) => CString::new(p.0.method_name())
            .map(CString::into_raw)
            .unwrap_or(std::ptr::null_mut()),
        None => std::ptr::null_mut(),
    }
}

/// Class count the predictor expects; 0 for a null handle.
///
/// # Safety
/// `pred` must be null or a live predictor handle.
#[no_mangle]
pub unsafe extern "C" fn sf_predictor_num_classes(pred: *const SfPredictor) -> usize {
    pred.as_ref().map(|p| p.0.num_classes()).unwrap_or(0)
}

/// Save a predictor as JSON (infinities encoded as `"inf"` / `"-inf"`).
///
/// # Safety
/// `pred` must be a live predictor handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn sf_predictor_save_json(
    pred: *const SfPredictor,
    path: *const c_char,
) -> SfStatus {
    guarded(|| {
        let Some(pred) = pred.as_ref() else {
            set_last_error("pred is null");
            return Ok(SfStatus::NullPointer);
        };
        let path = match cstr(path, "path") {
            Ok(s) => s,
            Err(status) => return Ok(status),
        };
        pred.0.save(Path::new(path))?;
        Ok(SfStatus::Ok)
    })
}

/// Load a predictor saved by [`sf_predictor_save_json`].
///
/// # Safety
/// `path` must be a valid string and `out` a valid pointer. On success
/// `*out` owns the predictor.
#[no_mangle]
pub unsafe extern "C" fn sf_predictor_load_json(
    path: *const c_char,
    out: *mut *mut SfPredictor,
) -> SfStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("out is null");
            return Ok(SfStatus::NullPointer);
        }
        let path = match cstr(path, "path") {
            Ok(s) => s,
            Err(status) => return Ok(status),
        };
        let pred = SetPredictor::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(SfPredictor(pred)));
        Ok(SfStatus::Ok)
    })
}

/// Predict sets for every record of `ds` and write the batch CSV
/// (`example_id,group,label,set_size,covered,members`).
///
/// # Safety
/// `pred` and `ds` must be live handles; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn sf_predict_to_csv(
    pred: *const SfPredictor,
    ds: *const SfDataset,
    path: *const c_char,
    force_nonempty: bool,
    randomize_ties: bool,
) -> SfStatus {
    guarded(|| {
        let (Some(pred), Some(ds)) = (pred.as_ref(), ds.as_ref()) else {
            set_last_error("pred or ds is null");
            return Ok(SfStatus::NullPointer);
        };
        let path = match cstr(path, "path") {
            Ok(s) => s,
            Err(status) => return Ok(status),
        };
        let opts = PredictOptions {
            force_nonempty,
            randomize_ties,
        };
        let sets = predict_batch(&ds.0, &pred.0, &opts)?;
        write_sets_csv(&sets, Path::new(path), None)?;
        Ok(SfStatus::Ok)
    })
}

/// Audit a sets CSV and write the fairness report as JSON. `n_groups = 0`
/// infers the group count from the file.
///
/// # Safety
/// `sets_path` and `out_json_path` must be valid strings.
#[no_mangle]
pub unsafe extern "C" fn sf_audit_csv_to_json(
    sets_path: *const c_char,
    n_groups: usize,
    out_json_path: *const c_char,
) -> SfStatus {
    guarded(|| {
        let sets_path = match cstr(sets_path, "sets_path") {
            Ok(s) => s,
            Err(status) => return Ok(status),
        };
        let out_path = match cstr(out_json_path, "out_json_path") {
            Ok(s) => s,
            Err(status) => return Ok(status),
        };
        let sets = setfair::setpred::read_sets_csv(Path::new(sets_path))?;
        let n_g = if n_groups == 0 {
            sets.iter().map(|s| s.group + 1).max().unwrap_or(0)
        } else {
            n_groups
        };
        let report = setfair::audit::audit_sets(&sets, n_g)?;
        std::fs::write(out_path, report.to_json()?).map_err(Error::Io)?;
        Ok(SfStatus::Ok)
    })
}

/// Conformal quantile of `scores[0..len]` at miscoverage `alpha`; writes
/// the threshold (possibly `+inf`) to `*out`.
///
/// # Safety
/// `scores` must point to `len` readable doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_conformal_quantile(
    scores: *const f64,
    len: usize,
    alpha: f64,
    out: *mut f64,
) -> SfStatus {
    guarded(|| {
        if scores.is_null() || out.is_null() {
            set_last_error("scores or out is null");
            return Ok(SfStatus::NullPointer);
        }
        let slice = std::slice::from_raw_parts(scores, len);
        let q = conformal_quantile(slice, alpha)?;
        *out = q;
        Ok(SfStatus::Ok)
    })
}
