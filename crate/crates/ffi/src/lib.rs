//! C ABI for `quotasteer`.
//!
//! Every fallible function returns a [`QsStatus`]. On anything other than
//! `QS_STATUS_OK` a message is available from [`qs_last_error`] on the same
//! thread until the next call. Results come back through out-pointers.
//! Strings returned as `char *` are owned by the caller and released with
//! [`qs_string_free`]; handles are released with their `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use quotasteer::annotation::{cohen_kappa, percent_agreement, AnnotationSet};
use quotasteer::attribute::{quantize_target, AttributeSchema, TargetSpec};
use quotasteer::belief::{monk_group, MonkGroup, MonkScale};
use quotasteer::control::RunReport;
use quotasteer::harness::{self, ExitStatus, ExperimentConfig};
use quotasteer::metrics::{self, GroundDistance};

/// Result codes. 2-4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsStatus {
    Ok = 0,
    NullPointer = 1,
    ConfigError = 2,
    NotConverged = 3,
    BackendFailure = 4,
    InvalidArgument = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Ground distance for [`qs_emd`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsGround {
    /// 1 between distinct bins.
    Unit = 0,
    /// `|i - j|`, for ordered bins.
    Linear = 1,
}

/// Closed-form coverage of uniform `b`-of-`k` batches over `trials` batches.
/// The per-batch probability is `p_numer / p_denom` in lowest terms.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QsCoverage {
    pub p_numer: u64,
    pub p_denom: u64,
    pub expected: f64,
    pub sigma: f64,
}

/// An experiment loaded from TOML. Opaque.
pub struct QsExperiment {
    config: ExperimentConfig,
}

/// The outcome of a run. Opaque.
pub struct QsReport {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type Failure = (QsStatus, String);

fn invalid(e: impl std::fmt::Display) -> Failure {
    (QsStatus::InvalidArgument, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            QsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err((QsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    non_null(p, what)?;
    Ok(&mut *p)
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn bins(k: usize) -> Result<Arc<AttributeSchema>, Failure> {
    AttributeSchema::ordinal("bins", (0..k).map(|i| format!("b{i}")))
        .map(Arc::new)
        .map_err(invalid)
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

unsafe fn dists(
    p: *const f64,
    q: *const f64,
    len: usize,
) -> Result<(metrics::ProbDist, metrics::ProbDist), Failure> {
    let schema = bins(len)?;
    let p =
        metrics::ProbDist::new(schema.clone(), slice(p, len, "p")?.to_vec()).map_err(invalid)?;
    let q = metrics::ProbDist::new(schema, slice(q, len, "q")?.to_vec()).map_err(invalid)?;
    Ok((p, q))
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn qs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Release a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn qs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn qs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Jensen-Shannon divergence, log base 2, of two probability vectors.
#[no_mangle]
pub unsafe extern "C" fn qs_js_divergence(
    p: *const f64,
    q: *const f64,
    len: usize,
    result: *mut f64,
) -> QsStatus {
    guard(|| {
        let (p, q) = dists(p, q, len)?;
        *out(result, "result")? = metrics::js_divergence(&p, &q).map_err(invalid)?;
        Ok(())
    })
}

/// Earth mover's distance under a preset ground distance.
#[no_mangle]
pub unsafe extern "C" fn qs_emd(
    p: *const f64,
    q: *const f64,
    len: usize,
    ground: QsGround,
    result: *mut f64,
) -> QsStatus {
    guard(|| {
        let (p, q) = dists(p, q, len)?;
        let d = match ground {
            QsGround::Unit => GroundDistance::unit(len),
            QsGround::Linear => GroundDistance::linear(len),
        };
        *out(result, "result")? = metrics::emd(&p, &q, &d).map_err(invalid)?;
        Ok(())
    })
}

/// Earth mover's distance under a caller-supplied `len * len` row-major
/// ground distance matrix.
#[no_mangle]
pub unsafe extern "C" fn qs_emd_matrix(
    p: *const f64,
    q: *const f64,
    len: usize,
    matrix: *const f64,
    result: *mut f64,
) -> QsStatus {
    guard(|| {
        let (p, q) = dists(p, q, len)?;
        let flat = slice(matrix, len * len, "matrix")?;
        let rows = flat.chunks(len.max(1)).map(<[f64]>::to_vec).collect();
        let d = GroundDistance::custom(rows).map_err(invalid)?;
        *out(result, "result")? = metrics::emd(&p, &q, &d).map_err(invalid)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qs_total_variation(
    p: *const f64,
    q: *const f64,
    len: usize,
    result: *mut f64,
) -> QsStatus {
    guard(|| {
        let (p, q) = dists(p, q, len)?;
        *out(result, "result")? = metrics::total_variation(p.probs(), q.probs());
        Ok(())
    })
}

/// Largest-remainder apportionment of `n` over `weights` into `counts`
/// (both `len` long).
#[no_mangle]
pub unsafe extern "C" fn qs_quantize_target(
    weights: *const f64,
    len: usize,
    n: u64,
    counts: *mut u64,
) -> QsStatus {
    guard(|| {
        let w = slice(weights, len, "weights")?.to_vec();
        let spec = TargetSpec::weights(bins(len)?, w).map_err(invalid)?;
        let ledger = quantize_target(&spec, n).map_err(invalid)?;
        non_null(counts, "counts")?;
        std::slice::from_raw_parts_mut(counts, len).copy_from_slice(ledger.target());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qs_coverage_analysis(
    k: u64,
    b: u64,
    trials: u64,
    result: *mut QsCoverage,
) -> QsStatus {
    guard(|| {
        let a = metrics::coverage_analysis(k, b, trials).map_err(invalid)?;
        let narrow = |v: u128| u64::try_from(v).map_err(|_| invalid("probability overflows u64"));
        *out(result, "result")? = QsCoverage {
            p_numer: narrow(*a.p.numer())?,
            p_denom: narrow(*a.p.denom())?,
            expected: a.expected,
            sigma: a.sigma,
        };
        Ok(())
    })
}

unsafe fn coded_pair(
    a: *const u32,
    b: *const u32,
    len: usize,
    categories: u32,
) -> Result<(AnnotationSet, AnnotationSet), Failure> {
    let schema = Arc::new(
        AttributeSchema::nominal("codes", (0..categories).map(|i| format!("c{i}")))
            .map_err(invalid)?,
    );
    let build = |coder: &str, codes: &[u32]| {
        let mut set = AnnotationSet::new(coder, schema.clone());
        for (i, &c) in codes.iter().enumerate() {
            if c >= categories {
                return Err(invalid(format!(
                    "code {c} out of range for {categories} categories"
                )));
            }
            set.insert(i.to_string(), schema.label(c as usize))
                .map_err(invalid)?;
        }
        Ok(set)
    };
    Ok((
        build("a", slice(a, len, "a")?)?,
        build("b", slice(b, len, "b")?)?,
    ))
}

/// Cohen's kappa for two coders' category codes (`0..categories`) over the
/// same `len` items.
#[no_mangle]
pub unsafe extern "C" fn qs_cohen_kappa(
    a: *const u32,
    b: *const u32,
    len: usize,
    categories: u32,
    result: *mut f64,
) -> QsStatus {
    guard(|| {
        let (a, b) = coded_pair(a, b, len, categories)?;
        *out(result, "result")? = cohen_kappa(&a, &b).map_err(invalid)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qs_percent_agreement(
    a: *const u32,
    b: *const u32,
    len: usize,
    categories: u32,
    result: *mut f64,
) -> QsStatus {
    guard(|| {
        let (a, b) = coded_pair(a, b, len, categories)?;
        *out(result, "result")? = percent_agreement(&a, &b).map_err(invalid)?;
        Ok(())
    })
}

/// Nearest Monk skin-tone swatch (1-10) for an sRGB color.
#[no_mangle]
pub extern "C" fn qs_monk_quantize(r: u8, g: u8, b: u8) -> u8 {
    MonkScale::default().quantize([r, g, b])
}

/// Codebook group of a Monk index: 0 Light, 1 Medium, 2 Dark.
#[no_mangle]
pub unsafe extern "C" fn qs_monk_group(index: u8, group: *mut u8) -> QsStatus {
    guard(|| {
        let g = monk_group(index).map_err(invalid)?;
        *out(group, "group")? = match g {
            MonkGroup::Light => 0,
            MonkGroup::Medium => 1,
            MonkGroup::Dark => 2,
        };
        Ok(())
    })
}

/// Parse an experiment from TOML. Relative paths inside it resolve against
/// `base_dir`, which may be NULL for the current directory.
#[no_mangle]
pub unsafe extern "C" fn qs_experiment_from_toml(
    toml: *const c_char,
    base_dir: *const c_char,
    experiment: *mut *mut QsExperiment,
) -> QsStatus {
    guard(|| {
        let text = text(toml, "toml")?;
        let base = if base_dir.is_null() {
            PathBuf::new()
        } else {
            PathBuf::from(self::text(base_dir, "base_dir")?)
        };
        let config = ExperimentConfig::from_toml_str(text, base)
            .map_err(|e| (QsStatus::ConfigError, e.to_string()))?;
        *out(experiment, "experiment")? = Box::into_raw(Box::new(QsExperiment { config }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qs_experiment_set_seed(
    experiment: *mut QsExperiment,
    seed: u64,
) -> QsStatus {
    guard(|| {
        out(experiment, "experiment")?.config.seed = Some(seed);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qs_experiment_free(experiment: *mut QsExperiment) {
    if !experiment.is_null() {
        drop(Box::from_raw(experiment));
    }
}

/// Run an experiment in memory; nothing is written to disk. With `ablation`
/// set, quota tracking is off. A report is produced for `QS_STATUS_OK`,
/// `QS_STATUS_NOT_CONVERGED`, and for `QS_STATUS_BACKEND_FAILURE` when some
/// generations completed; otherwise `*report` is set to NULL.
#[no_mangle]
pub unsafe extern "C" fn qs_experiment_run(
    experiment: *const QsExperiment,
    ablation: bool,
    report: *mut *mut QsReport,
) -> QsStatus {
    let mut status = QsStatus::Ok;
    let guarded = guard(|| {
        non_null(experiment, "experiment")?;
        let slot = out(report, "report")?;
        *slot = ptr::null_mut();
        let outcome = harness::run_experiment(&(*experiment).config, ablation);
        if let Some(r) = outcome.report {
            *slot = Box::into_raw(Box::new(QsReport { report: r }));
        }
        status = match outcome.status {
            ExitStatus::Converged => QsStatus::Ok,
            ExitStatus::ConfigError => QsStatus::ConfigError,
            ExitStatus::NotConverged => QsStatus::NotConverged,
            ExitStatus::BackendFailure => QsStatus::BackendFailure,
        };
        if status != QsStatus::Ok {
            return Err((status, outcome.message));
        }
        Ok(())
    });
    if guarded == QsStatus::Ok {
        status
    } else {
        guarded
    }
}

#[no_mangle]
pub unsafe extern "C" fn qs_report_free(report: *mut QsReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

#[no_mangle]
pub unsafe extern "C" fn qs_report_converged(report: *const QsReport) -> bool {
    !report.is_null() && (*report).report.converged
}

/// Number of bins in the report's attribute.
#[no_mangle]
pub unsafe extern "C" fn qs_report_bins(report: *const QsReport) -> usize {
    if report.is_null() {
        0
    } else {
        (*report).report.labels.len()
    }
}

/// Label of bin `index` as a caller-owned string, or NULL when out of range.
#[no_mangle]
pub unsafe extern "C" fn qs_report_label(report: *const QsReport, index: usize) -> *mut c_char {
    if report.is_null() {
        return ptr::null_mut();
    }
    let report = &*report;
    report
        .report
        .labels
        .get(index)
        .map_or(ptr::null_mut(), |l| into_c_string(l.clone()))
}

unsafe fn copy_counts(src: &[u64], dst: *mut u64, len: usize) -> Result<(), Failure> {
    if len < src.len() {
        return Err((
            QsStatus::BufferTooSmall,
            format!("need {} slots, got {len}", src.len()),
        ));
    }
    non_null(dst, "counts")?;
    std::slice::from_raw_parts_mut(dst, src.len()).copy_from_slice(src);
    Ok(())
}

/// Realized per-bin counts; `len` must be at least [`qs_report_bins`].
#[no_mangle]
pub unsafe extern "C" fn qs_report_final_counts(
    report: *const QsReport,
    counts: *mut u64,
    len: usize,
) -> QsStatus {
    guard(|| {
        non_null(report, "report")?;
        copy_counts(&(*report).report.final_counts, counts, len)
    })
}

/// Quantized target counts; `len` must be at least [`qs_report_bins`].
#[no_mangle]
pub unsafe extern "C" fn qs_report_target_counts(
    report: *const QsReport,
    counts: *mut u64,
    len: usize,
) -> QsStatus {
    guard(|| {
        non_null(report, "report")?;
        copy_counts(&(*report).report.target_counts, counts, len)
    })
}

/// JS divergence, EMD and total variation of the realized histogram against
/// the target. Fails when no generation was accepted.
#[no_mangle]
pub unsafe extern "C" fn qs_report_metrics(
    report: *const QsReport,
    js_div: *mut f64,
    emd: *mut f64,
    tv: *mut f64,
) -> QsStatus {
    guard(|| {
        non_null(report, "report")?;
        let r = &(*report).report;
        let (Some(j), Some(e), Some(t)) = (r.js_div, r.emd, r.tv) else {
            return Err(invalid("report has no accepted generations"));
        };
        *out(js_div, "js_div")? = j;
        *out(emd, "emd")? = e;
        *out(tv, "tv")? = t;
        Ok(())
    })
}

/// Pretty-printed report JSON as a caller-owned string.
#[no_mangle]
pub unsafe extern "C" fn qs_report_to_json(report: *const QsReport) -> *mut c_char {
    if report.is_null() {
        return ptr::null_mut();
    }
    into_c_string((*report).report.to_json())
}

/// The JSON-lines trace journal as a caller-owned string.
#[no_mangle]
pub unsafe extern "C" fn qs_report_trace(report: *const QsReport) -> *mut c_char {
    if report.is_null() {
        return ptr::null_mut();
    }
    into_c_string((*report).report.trace_journal())
}
