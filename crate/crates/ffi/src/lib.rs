//! C ABI over the `qtmle` estimators and Monte Carlo harness.
//!
//! Objects are opaque handles created by `*_new`/`qtmle_estimate`/
//! `qtmle_simulate` and released with the matching `*_free`. Every fallible
//! call returns a [`QtmleStatus`]; on failure the message is available from
//! [`qtmle_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::DMatrix;
use qtmle::cli::{cmd_estimate, Estimand, Format, RunConfig};
use qtmle::inference::EstimateReport;
use qtmle::sim::{run_monte_carlo, Estimator, OutcomeModel, Scenario, ScenarioSpec, SimulationSummary};
use qtmle::{Dataset, EstimandKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QtmleStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    EstimationFailed = 3,
    /// The requested quantity does not exist for this result.
    NotAvailable = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QtmleDataKind {
    /// Indicator is observation of the outcome.
    MissingOutcome = 0,
    /// Indicator is treatment; every outcome is observed.
    EffectOnTreated = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QtmleEstimand {
    Missing = 0,
    Effect = 1,
    Att = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QtmleEstimator {
    Tmle = 0,
    Aipw = 1,
    Ipw = 2,
    Firpo = 3,
    Od = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QtmleOutcomeModel {
    Gaussian = 0,
    DensitySl = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct QtmleEstimateOptions {
    pub estimand: QtmleEstimand,
    pub estimator: QtmleEstimator,
    pub q: f64,
    pub ci_level: f64,
    pub grid_size: usize,
    pub seed: u64,
    pub outcome_model: QtmleOutcomeModel,
}

/// Bit flags selecting scenarios in [`QtmleSimulationOptions::scenarios`].
pub const QTMLE_SCENARIO_A: u32 = 1;
pub const QTMLE_SCENARIO_B: u32 = 2;
pub const QTMLE_SCENARIO_C: u32 = 4;
pub const QTMLE_SCENARIO_D: u32 = 8;

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct QtmleSimulationOptions {
    pub n: usize,
    pub reps: usize,
    pub scenarios: u32,
    pub q: f64,
    pub grid_size: usize,
    pub seed: u64,
    pub shift: f64,
    pub ci_level: f64,
    /// 0 runs on the global thread pool.
    pub threads: usize,
    pub outcome_model: QtmleOutcomeModel,
}

/// One aggregated row. Quantities that do not apply are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct QtmleSummaryRow {
    /// `'a'` to `'d'`.
    pub scenario: c_char,
    pub estimator: QtmleEstimator,
    pub n: usize,
    pub q: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub rejection_rate: f64,
    pub mean_iterations: f64,
    pub reps: usize,
    pub failures: usize,
}

pub struct QtmleDataset(Dataset);
pub struct QtmleEstimate(EstimateReport);
pub struct QtmleSimulation(SimulationSummary);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (QtmleStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QtmleStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QtmleStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal error: panic in qtmle");
            QtmleStatus::Internal
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    (QtmleStatus::InvalidArgument, e.to_string())
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err((QtmleStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qtmle_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qtmle_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Copies `n` rows of `p` row-major covariates, `n` indicator bytes (nonzero
/// is 1) and `n` outcomes. Outcomes of units with indicator 0 may be NaN
/// for [`QtmleDataKind::MissingOutcome`].
///
/// # Safety
/// `covariates` must point to `n * p` doubles, `indicator` to `n` bytes and
/// `outcome` to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qtmle_dataset_new(
    covariates: *const f64,
    n: usize,
    p: usize,
    indicator: *const u8,
    outcome: *const f64,
    kind: QtmleDataKind,
    out: *mut *mut QtmleDataset,
) -> QtmleStatus {
    guard(|| {
        non_null(covariates, "covariates")?;
        non_null(indicator, "indicator")?;
        non_null(outcome, "outcome")?;
        non_null(out, "out")?;
        if n == 0 || p == 0 {
            return Err(invalid("dataset needs at least one row and one covariate"));
        }
        let len = n.checked_mul(p).ok_or_else(|| invalid("n * p overflows"))?;
        let cov = std::slice::from_raw_parts(covariates, len);
        let ind: Vec<bool> = std::slice::from_raw_parts(indicator, n).iter().map(|&b| b != 0).collect();
        let y = std::slice::from_raw_parts(outcome, n).to_vec();
        let kind = match kind {
            QtmleDataKind::MissingOutcome => EstimandKind::MissingOutcome,
            QtmleDataKind::EffectOnTreated => EstimandKind::EffectOnTreated,
        };
        let data = Dataset::new(DMatrix::from_row_slice(n, p, cov), ind, y, kind).map_err(invalid)?;
        *out = Box::into_raw(Box::new(QtmleDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`qtmle_dataset_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qtmle_dataset_free(dataset: *mut QtmleDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of units, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qtmle_dataset_len(dataset: *const QtmleDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.n())
}

#[no_mangle]
pub extern "C" fn qtmle_estimate_options_default() -> QtmleEstimateOptions {
    let spec = ScenarioSpec::default();
    QtmleEstimateOptions {
        estimand: QtmleEstimand::Missing,
        estimator: QtmleEstimator::Tmle,
        q: 0.5,
        ci_level: spec.ci_level,
        grid_size: spec.grid_size,
        seed: spec.seed,
        outcome_model: QtmleOutcomeModel::Gaussian,
    }
}

fn estimator(e: QtmleEstimator) -> Estimator {
    match e {
        QtmleEstimator::Tmle => Estimator::Tmle,
        QtmleEstimator::Aipw => Estimator::Aipw,
        QtmleEstimator::Ipw => Estimator::Ipw,
        QtmleEstimator::Firpo => Estimator::Firpo,
        QtmleEstimator::Od => Estimator::Od,
    }
}

fn outcome_model(m: QtmleOutcomeModel) -> OutcomeModel {
    match m {
        QtmleOutcomeModel::Gaussian => OutcomeModel::Gaussian,
        QtmleOutcomeModel::DensitySl => OutcomeModel::DensitySl,
    }
}

/// Fits the nuisance models on `dataset` and runs one estimator at one level.
///
/// # Safety
/// `dataset` and `options` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qtmle_estimate(
    dataset: *const QtmleDataset,
    options: *const QtmleEstimateOptions,
    out: *mut *mut QtmleEstimate,
) -> QtmleStatus {
    guard(|| {
        non_null(dataset, "dataset")?;
        non_null(options, "options")?;
        non_null(out, "out")?;
        let data = &(*dataset).0;
        let o = *options;
        let estimand = match o.estimand {
            QtmleEstimand::Missing => Estimand::Missing,
            QtmleEstimand::Effect => Estimand::Effect,
            QtmleEstimand::Att => Estimand::Att,
        };
        let base = ScenarioSpec::default();
        let cfg = RunConfig {
            input: None,
            q_levels: vec![o.q],
            estimand,
            estimators: vec![estimator(o.estimator)],
            spec: ScenarioSpec {
                q_levels: vec![o.q],
                grid_size: o.grid_size,
                seed: o.seed,
                ci_level: o.ci_level,
                outcome_model: outcome_model(o.outcome_model),
                ..base
            },
            format: Format::Json,
            output: None,
        };
        if !(o.q > 0.0 && o.q < 1.0) {
            return Err(invalid(format!("quantile level {} must lie in (0, 1)", o.q)));
        }
        cfg.spec.validate().map_err(invalid)?;
        let mut reports = cmd_estimate(&cfg, data).map_err(|e| {
            let status = if e.code == qtmle::cli::exit::ESTIMATION {
                QtmleStatus::EstimationFailed
            } else {
                QtmleStatus::InvalidArgument
            };
            (status, e.message)
        })?;
        let report = reports
            .pop()
            .ok_or_else(|| invalid("this estimator is not available for the chosen estimand"))?;
        *out = Box::into_raw(Box::new(QtmleEstimate(report)));
        Ok(())
    })
}

/// # Safety
/// `estimate` must come from [`qtmle_estimate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qtmle_estimate_free(estimate: *mut QtmleEstimate) {
    if !estimate.is_null() {
        drop(Box::from_raw(estimate));
    }
}

/// # Safety
/// `estimate` must be live and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn qtmle_estimate_value(estimate: *const QtmleEstimate, value: *mut f64) -> QtmleStatus {
    guard(|| {
        non_null(estimate, "estimate")?;
        non_null(value, "value")?;
        *value = (*estimate).0.estimate;
        Ok(())
    })
}

/// Standard error and Wald interval; `NotAvailable` for point estimators.
///
/// # Safety
/// `estimate` must be live and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn qtmle_estimate_interval(
    estimate: *const QtmleEstimate,
    se: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
) -> QtmleStatus {
    guard(|| {
        non_null(estimate, "estimate")?;
        non_null(se, "se")?;
        non_null(lower, "lower")?;
        non_null(upper, "upper")?;
        let ci = (*estimate)
            .0
            .interval
            .ok_or_else(|| (QtmleStatus::NotAvailable, "no interval for this estimator".to_string()))?;
        *se = ci.se;
        *lower = ci.lower;
        *upper = ci.upper;
        Ok(())
    })
}

/// Two-sided Wald p-value for a zero parameter.
///
/// # Safety
/// `estimate` must be live and `p_value` writable.
#[no_mangle]
pub unsafe extern "C" fn qtmle_estimate_p_value(estimate: *const QtmleEstimate, p_value: *mut f64) -> QtmleStatus {
    guard(|| {
        non_null(estimate, "estimate")?;
        non_null(p_value, "p_value")?;
        let t = (*estimate)
            .0
            .test
            .ok_or_else(|| (QtmleStatus::NotAvailable, "no test for this estimator".to_string()))?;
        *p_value = t.p_value;
        Ok(())
    })
}

/// Targeting diagnostics of a single-arm TMLE fit.
///
/// # Safety
/// `estimate` must be live and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn qtmle_estimate_diagnostics(
    estimate: *const QtmleEstimate,
    iterations: *mut usize,
    final_epsilon: *mut f64,
    score_residual: *mut f64,
    converged: *mut bool,
) -> QtmleStatus {
    guard(|| {
        non_null(estimate, "estimate")?;
        non_null(iterations, "iterations")?;
        non_null(final_epsilon, "final_epsilon")?;
        non_null(score_residual, "score_residual")?;
        non_null(converged, "converged")?;
        let d = (*estimate)
            .0
            .diagnostics
            .as_ref()
            .ok_or_else(|| (QtmleStatus::NotAvailable, "no targeting diagnostics for this estimate".to_string()))?;
        *iterations = d.iterations;
        *final_epsilon = d.final_epsilon;
        *score_residual = d.score_residual;
        *converged = d.converged;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn qtmle_simulation_options_default() -> QtmleSimulationOptions {
    let spec = ScenarioSpec::default();
    QtmleSimulationOptions {
        n: spec.n,
        reps: spec.reps,
        scenarios: QTMLE_SCENARIO_A | QTMLE_SCENARIO_B | QTMLE_SCENARIO_C | QTMLE_SCENARIO_D,
        q: 0.5,
        grid_size: spec.grid_size,
        seed: spec.seed,
        shift: spec.shift,
        ci_level: spec.ci_level,
        threads: 0,
        outcome_model: QtmleOutcomeModel::Gaussian,
    }
}

/// Runs the Kang-Schafer study. Output is identical for any thread count.
///
/// # Safety
/// `options` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qtmle_simulate(
    options: *const QtmleSimulationOptions,
    out: *mut *mut QtmleSimulation,
) -> QtmleStatus {
    guard(|| {
        non_null(options, "options")?;
        non_null(out, "out")?;
        let o = *options;
        let scenarios: Vec<Scenario> = [
            (QTMLE_SCENARIO_A, Scenario::A),
            (QTMLE_SCENARIO_B, Scenario::B),
            (QTMLE_SCENARIO_C, Scenario::C),
            (QTMLE_SCENARIO_D, Scenario::D),
        ]
        .into_iter()
        .filter(|(bit, _)| o.scenarios & bit != 0)
        .map(|(_, s)| s)
        .collect();
        let spec = ScenarioSpec {
            n: o.n,
            reps: o.reps,
            scenarios,
            q_levels: vec![o.q],
            grid_size: o.grid_size,
            seed: o.seed,
            shift: o.shift,
            ci_level: o.ci_level,
            outcome_model: outcome_model(o.outcome_model),
            threads: (o.threads > 0).then_some(o.threads),
        };
        let summary = run_monte_carlo(&spec).map_err(invalid)?;
        *out = Box::into_raw(Box::new(QtmleSimulation(summary)));
        Ok(())
    })
}

/// # Safety
/// `sim` must come from [`qtmle_simulate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qtmle_simulation_free(sim: *mut QtmleSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Number of summary rows, or 0 for a null handle.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qtmle_simulation_row_count(sim: *const QtmleSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.0.rows.len())
}

/// Replications with at least one failed estimator, or 0 for a null handle.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qtmle_simulation_failed_replications(sim: *const QtmleSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.0.failed_replications)
}

/// # Safety
/// `sim` must be live and `row` writable.
#[no_mangle]
pub unsafe extern "C" fn qtmle_simulation_row(
    sim: *const QtmleSimulation,
    index: usize,
    row: *mut QtmleSummaryRow,
) -> QtmleStatus {
    guard(|| {
        non_null(sim, "sim")?;
        non_null(row, "row")?;
        let rows = &(*sim).0.rows;
        let r = rows
            .get(index)
            .ok_or_else(|| invalid(format!("row {index} out of range ({} rows)", rows.len())))?;
        let letter = match r.scenario {
            Scenario::A => b'a',
            Scenario::B => b'b',
            Scenario::C => b'c',
            Scenario::D => b'd',
        };
        *row = QtmleSummaryRow {
            scenario: letter as c_char,
            estimator: match r.estimator {
                Estimator::Tmle => QtmleEstimator::Tmle,
                Estimator::Aipw => QtmleEstimator::Aipw,
                Estimator::Ipw => QtmleEstimator::Ipw,
                Estimator::Firpo => QtmleEstimator::Firpo,
                Estimator::Od => QtmleEstimator::Od,
            },
            n: r.n,
            q: r.q,
            bias: r.bias,
            sd: r.sd,
            rmse: r.rmse,
            coverage: r.coverage.unwrap_or(f64::NAN),
            rejection_rate: r.rejection_rate.unwrap_or(f64::NAN),
            mean_iterations: r.mean_iterations.unwrap_or(f64::NAN),
            reps: r.reps,
            failures: r.failures,
        };
        Ok(())
    })
}
