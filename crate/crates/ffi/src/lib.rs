//! C ABI over the deltaprint library.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a status:
//! `DP_OK` or an error category code, with the message available from
//! `dp_last_error` on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use deltaprint::adapter_io::{Manifest, NamePattern, ScalePolicy};
use deltaprint::centroid::CentroidModel;
use deltaprint::classify::{
    binary_comparison, detection_split, evaluate_population, score_rows, sigmoid, train_logreg, ClassifierModel,
    EvalConfig, EvalReport,
};
use deltaprint::error::Error;
use deltaprint::pipeline::{feature_matrix, training_centroid, Population};
use deltaprint::spectral::FeatureMatrix;
use deltaprint::synthgen::{gen_members, PopulationSpec};
use nalgebra::DMatrix;

pub const DP_OK: i32 = 0;
/// A panic was caught at the boundary.
pub const DP_INTERNAL: i32 = 1;
// Error statuses equal the library's error category codes.
pub const DP_ERR_FORMAT: i32 = 10;
pub const DP_ERR_PAIRING: i32 = 11;
pub const DP_ERR_SHAPE: i32 = 12;
pub const DP_ERR_NUMERIC: i32 = 13;
pub const DP_ERR_SCHEMA: i32 = 14;
pub const DP_ERR_PARAMETER: i32 = 15;
pub const DP_ERR_POPULATION: i32 = 16;
pub const DP_ERR_CLASS: i32 = 17;
pub const DP_ERR_DEGENERATE: i32 = 18;
pub const DP_ERR_OPTIMIZATION: i32 = 19;
pub const DP_ERR_STRATIFICATION: i32 = 20;
pub const DP_ERR_COVERAGE: i32 = 21;
pub const DP_ERR_PARSE: i32 = 22;
pub const DP_ERR_DEPENDENCY: i32 = 23;
pub const DP_ERR_IO: i32 = 24;

pub const DP_SCALE_UNIT: i32 = 0;
pub const DP_SCALE_ALPHA_OVER_RANK: i32 = 1;

/// Reconstructed adapter deltas with their labels.
pub struct DpPopulation(Population);

/// Healthy centroid built from the detection training split.
pub struct DpCentroid(CentroidModel);

/// Spectral features, one row per adapter.
pub struct DpFeatureMatrix(FeatureMatrix);

/// Healthy-vs-drifted logistic-regression detector.
pub struct DpClassifier(ClassifierModel);

/// Output of the evaluation battery.
pub struct DpReport(EvalReport);

/// Split and solver settings shared by centroid, training and evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DpEvalOptions {
    pub lambda: f64,
    pub ratio: f64,
    pub seed: u64,
    pub n_bootstrap: usize,
}

impl DpEvalOptions {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            lambda: self.lambda,
            ratio: self.ratio,
            seed: self.seed,
            n_bootstrap: self.n_bootstrap,
            ..EvalConfig::default()
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DP_OK,
        Ok(Err(e)) => {
            let code = e.category().code();
            set_last_error(e.to_string());
            code
        }
        Err(_) => {
            set_last_error("internal panic".into());
            DP_INTERNAL
        }
    }
}

fn null_arg(name: &str) -> Error {
    Error::Parameter(format!("`{name}` is NULL"))
}

unsafe fn arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Error> {
    // SAFETY: the caller passes NULL or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| null_arg(name))
}

unsafe fn out_slot<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Error> {
    // SAFETY: the caller passes NULL or a writable location.
    unsafe { p.as_mut() }.ok_or_else(|| null_arg(name))
}

unsafe fn string_arg(p: *const c_char, name: &str) -> Result<String, Error> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    // SAFETY: non-NULL and NUL-terminated per the contract.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(str::to_string)
        .map_err(|_| Error::Parameter(format!("`{name}` is not UTF-8")))
}

fn scale_policy(code: i32) -> Result<ScalePolicy, Error> {
    match code {
        DP_SCALE_UNIT => Ok(ScalePolicy::Unit),
        DP_SCALE_ALPHA_OVER_RANK => Ok(ScalePolicy::AlphaOverRank),
        other => Err(Error::Parameter(format!("unknown scale policy code {other}"))),
    }
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message of the last failing call on this thread, or NULL. The pointer is
/// valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn dp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code ("ok", "format", ... "io", "internal").
#[no_mangle]
pub extern "C" fn dp_status_name(status: i32) -> *const c_char {
    let name: &'static CStr = match status {
        DP_OK => c"ok",
        DP_INTERNAL => c"internal",
        DP_ERR_FORMAT => c"format",
        DP_ERR_PAIRING => c"pairing",
        DP_ERR_SHAPE => c"shape",
        DP_ERR_NUMERIC => c"numeric",
        DP_ERR_SCHEMA => c"schema",
        DP_ERR_PARAMETER => c"parameter",
        DP_ERR_POPULATION => c"population",
        DP_ERR_CLASS => c"class",
        DP_ERR_DEGENERATE => c"degeneracy",
        DP_ERR_OPTIMIZATION => c"optimization",
        DP_ERR_STRATIFICATION => c"stratification",
        DP_ERR_COVERAGE => c"coverage",
        DP_ERR_PARSE => c"parse",
        DP_ERR_DEPENDENCY => c"dependency",
        DP_ERR_IO => c"io",
        _ => c"unknown",
    };
    name.as_ptr()
}

/// Defaults: lambda 1, ratio 0.7, seed 0, 1000 bootstrap resamples.
#[no_mangle]
pub extern "C" fn dp_eval_options_default() -> DpEvalOptions {
    let c = EvalConfig::default();
    DpEvalOptions {
        lambda: c.lambda,
        ratio: c.ratio,
        seed: c.seed,
        n_bootstrap: c.n_bootstrap,
    }
}

/// Loads every adapter listed in a manifest file.
///
/// # Safety
/// `manifest_path` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dp_population_load(
    manifest_path: *const c_char,
    scale: i32,
    out: *mut *mut DpPopulation,
) -> i32 {
    guard(|| {
        let out = unsafe { out_slot(out, "out") }?;
        let path = unsafe { string_arg(manifest_path, "manifest_path") }?;
        let policy = scale_policy(scale)?;
        let manifest = Manifest::load(Path::new(&path))?;
        let pop = Population::load(&manifest, &NamePattern::default(), policy)?;
        *out = into_handle(DpPopulation(pop));
        Ok(())
    })
}

/// Generates the default synthetic population in memory.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dp_population_synthetic(seed: u64, out: *mut *mut DpPopulation) -> i32 {
    guard(|| {
        let out = unsafe { out_slot(out, "out") }?;
        let spec = PopulationSpec {
            master_seed: seed,
            ..PopulationSpec::default()
        };
        let weights: Vec<_> = gen_members(&spec)?.into_iter().map(|m| m.weights).collect();
        *out = into_handle(DpPopulation(Population::from_weights(&weights, ScalePolicy::Unit)?));
        Ok(())
    })
}

/// Number of adapters, or 0 for NULL.
///
/// # Safety
/// `pop` is NULL or a live population handle.
#[no_mangle]
pub unsafe extern "C" fn dp_population_len(pop: *const DpPopulation) -> usize {
    unsafe { pop.as_ref() }.map_or(0, |p| p.0.deltas.len())
}

/// # Safety
/// `pop` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_population_free(pop: *mut DpPopulation) {
    if !pop.is_null() {
        drop(unsafe { Box::from_raw(pop) });
    }
}

/// Centroid of the healthy adapters in the detection training split.
///
/// # Safety
/// `pop` is a live population handle; `opts` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dp_centroid_build(
    pop: *const DpPopulation,
    opts: *const DpEvalOptions,
    k: usize,
    out: *mut *mut DpCentroid,
) -> i32 {
    guard(|| {
        let out = unsafe { out_slot(out, "out") }?;
        let pop = unsafe { arg(pop, "pop") }?;
        let opts = unsafe { arg(opts, "opts") }?;
        *out = into_handle(DpCentroid(training_centroid(&pop.0, &opts.config(), k)?));
        Ok(())
    })
}

/// # Safety
/// `c` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_centroid_free(c: *mut DpCentroid) {
    if !c.is_null() {
        drop(unsafe { Box::from_raw(c) });
    }
}

/// Feature matrix; `centroid` may be NULL, which omits direction features.
///
/// # Safety
/// `pop` is a live handle, `centroid` is NULL or a live handle, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dp_features_extract(
    pop: *const DpPopulation,
    centroid: *const DpCentroid,
    k: usize,
    out: *mut *mut DpFeatureMatrix,
) -> i32 {
    guard(|| {
        let out = unsafe { out_slot(out, "out") }?;
        let pop = unsafe { arg(pop, "pop") }?;
        let centroid = unsafe { centroid.as_ref() }.map(|c| &c.0);
        *out = into_handle(DpFeatureMatrix(feature_matrix(&pop.0, centroid, k)?));
        Ok(())
    })
}

/// # Safety
/// `m` is a live handle; `rows` and `cols` are writable.
#[no_mangle]
pub unsafe extern "C" fn dp_features_shape(m: *const DpFeatureMatrix, rows: *mut usize, cols: *mut usize) -> i32 {
    guard(|| {
        let m = unsafe { arg(m, "m") }?;
        *unsafe { out_slot(rows, "rows") }? = m.0.n_rows();
        *unsafe { out_slot(cols, "cols") }? = m.0.columns.len();
        Ok(())
    })
}

/// Copies the values row-major into `buf`, which holds `len` doubles and
/// must be exactly rows * cols long.
///
/// # Safety
/// `m` is a live handle; `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dp_features_copy(m: *const DpFeatureMatrix, buf: *mut f64, len: usize) -> i32 {
    guard(|| {
        let m = unsafe { arg(m, "m") }?;
        let (r, c) = (m.0.n_rows(), m.0.columns.len());
        if len != r * c {
            return Err(Error::Shape(format!("buffer holds {len} values, matrix has {r} x {c}")));
        }
        if buf.is_null() {
            return Err(null_arg("buf"));
        }
        // SAFETY: non-NULL and `len` long per the contract.
        let dst = unsafe { std::slice::from_raw_parts_mut(buf, len) };
        for i in 0..r {
            dst[i * c..(i + 1) * c].copy_from_slice(&m.0.row(i));
        }
        Ok(())
    })
}

/// Name of column `index` as a new string; release it with `dp_string_free`.
///
/// # Safety
/// `m` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dp_features_column_name(m: *const DpFeatureMatrix, index: usize, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let out = unsafe { out_slot(out, "out") }?;
        let m = unsafe { arg(m, "m") }?;
        let col = m.0.columns.get(index).ok_or_else(|| {
            Error::Parameter(format!("column {index} out of range ({} columns)", m.0.columns.len()))
        })?;
        *out = CString::new(col.header()).expect("headers hold no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `m` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_features_free(m: *mut DpFeatureMatrix) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Fits healthy vs drifted on the training rows of the detection split.
///
/// # Safety
/// `m` is a live handle; `opts` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dp_classifier_train(
    m: *const DpFeatureMatrix,
    opts: *const DpEvalOptions,
    out: *mut *mut DpClassifier,
) -> i32 {
    guard(|| {
        let out = unsafe { out_slot(out, "out") }?;
        let m = unsafe { arg(m, "m") }?;
        let config = unsafe { arg(opts, "opts") }?.config();
        let labelled: Vec<_> = m.0.ids.iter().cloned().zip(m.0.labels.iter().cloned()).collect();
        let plan = detection_split(&labelled, &config)?;
        let (ids, labels) = binary_comparison().rows(&m.0)?;
        *out = into_handle(DpClassifier(train_logreg(&m.0, &ids, &labels, &plan, config.lambda)?));
        Ok(())
    })
}

/// Drift probability for every row of `m`, in row order, into `probs`
/// (`len` must equal the row count).
///
/// # Safety
/// `clf` and `m` are live handles; `probs` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dp_classifier_predict(
    clf: *const DpClassifier,
    m: *const DpFeatureMatrix,
    probs: *mut f64,
    len: usize,
) -> i32 {
    guard(|| {
        let clf = unsafe { arg(clf, "clf") }?;
        let m = unsafe { arg(m, "m") }?;
        if len != m.0.n_rows() {
            return Err(Error::Shape(format!("buffer holds {len} values, matrix has {} rows", m.0.n_rows())));
        }
        if probs.is_null() {
            return Err(null_arg("probs"));
        }
        let scores = score_rows(&clf.0, &m.0, &m.0.ids)?;
        // SAFETY: non-NULL and `len` long per the contract.
        let dst = unsafe { std::slice::from_raw_parts_mut(probs, len) };
        for (d, s) in dst.iter_mut().zip(scores) {
            *d = sigmoid(s);
        }
        Ok(())
    })
}

/// # Safety
/// `clf` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_classifier_free(clf: *mut DpClassifier) {
    if !clf.is_null() {
        drop(unsafe { Box::from_raw(clf) });
    }
}

/// Runs the full evaluation battery on `m`.
///
/// # Safety
/// `m` is a live handle; `opts` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dp_evaluate(
    m: *const DpFeatureMatrix,
    opts: *const DpEvalOptions,
    out: *mut *mut DpReport,
) -> i32 {
    guard(|| {
        let out = unsafe { out_slot(out, "out") }?;
        let m = unsafe { arg(m, "m") }?;
        let config = unsafe { arg(opts, "opts") }?.config();
        *out = into_handle(DpReport(evaluate_population(&m.0, &config)?));
        Ok(())
    })
}

/// Held-out AUC and interval of the binary detector on every feature.
///
/// # Safety
/// `r` is a live handle; the three outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn dp_report_binary_auc(r: *const DpReport, auc: *mut f64, ci_low: *mut f64, ci_high: *mut f64) -> i32 {
    guard(|| {
        let r = unsafe { arg(r, "r") }?;
        let name = binary_comparison().name();
        let cell = r
            .0
            .comparisons
            .get(&name)
            .and_then(|g| g.get("all").or_else(|| g.values().next()))
            .and_then(|m| m.get("both").or_else(|| m.values().next()))
            .ok_or_else(|| Error::Coverage(format!("report has no `{name}` cell")))?;
        *unsafe { out_slot(auc, "auc") }? = cell.auc;
        *unsafe { out_slot(ci_low, "ci_low") }? = cell.ci.low;
        *unsafe { out_slot(ci_high, "ci_high") }? = cell.ci.high;
        Ok(())
    })
}

/// The report as JSON; release it with `dp_string_free`.
///
/// # Safety
/// `r` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dp_report_to_json(r: *const DpReport, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let out = unsafe { out_slot(out, "out") }?;
        let r = unsafe { arg(r, "r") }?;
        let text = serde_json::to_string(&r.0).map_err(|e| Error::Format(e.to_string()))?;
        *out = CString::new(text).expect("JSON holds no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `r` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_report_free(r: *mut DpReport) {
    if !r.is_null() {
        drop(unsafe { Box::from_raw(r) });
    }
}

/// Singular values, descending, of a row-major `rows` x `cols` matrix.
/// `out` must hold min(rows, cols) doubles.
///
/// # Safety
/// `data` points to rows * cols doubles; `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dp_singular_values(
    data: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> i32 {
    guard(|| {
        if data.is_null() || out.is_null() {
            return Err(null_arg(if data.is_null() { "data" } else { "out" }));
        }
        let p = rows.min(cols);
        if out_len != p {
            return Err(Error::Shape(format!("output holds {out_len} values, need {p}")));
        }
        // SAFETY: non-NULL and sized per the contract.
        let src = unsafe { std::slice::from_raw_parts(data, rows * cols) };
        let s = deltaprint::spectral::svd(&DMatrix::from_row_slice(rows, cols, src))?;
        // SAFETY: as above.
        unsafe { std::slice::from_raw_parts_mut(out, p) }.copy_from_slice(&s.sigma[..p]);
        Ok(())
    })
}

/// AUC of `scores` against 0/1 `labels`, ties counted half.
///
/// # Safety
/// `scores` and `labels` point to `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dp_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> i32 {
    guard(|| {
        if scores.is_null() || labels.is_null() {
            return Err(null_arg(if scores.is_null() { "scores" } else { "labels" }));
        }
        // SAFETY: non-NULL and `n` long per the contract.
        let s = unsafe { std::slice::from_raw_parts(scores, n) };
        let l: Vec<bool> = unsafe { std::slice::from_raw_parts(labels, n) }.iter().map(|b| *b != 0).collect();
        *unsafe { out_slot(out, "out") }? = deltaprint::stats::auc(s, &l)?;
        Ok(())
    })
}

/// # Safety
/// `s` is NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
