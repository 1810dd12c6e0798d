use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use qtmle::sim::generate_ks;
use qtmle_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let p = qtmle_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Kang-Schafer sample flattened for the C ABI: row-major covariates,
/// treatment bytes and outcomes (NaN where hidden).
fn ks_buffers(n: usize, hide_untreated: bool) -> (Vec<f64>, Vec<u8>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = generate_ks(n, &mut rng, 0.0);
    let cov: Vec<f64> = (0..n).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| s.w[(i, j)]).collect();
    let ind: Vec<u8> = s.t.iter().map(|&t| t as u8).collect();
    let y = s.y.iter().zip(&s.t).map(|(&y, &t)| if hide_untreated && !t { f64::NAN } else { y }).collect();
    (cov, ind, y)
}

fn dataset(n: usize, kind: QtmleDataKind) -> *mut QtmleDataset {
    let (cov, ind, y) = ks_buffers(n, kind == QtmleDataKind::MissingOutcome);
    let mut out = ptr::null_mut();
    let status = unsafe { qtmle_dataset_new(cov.as_ptr(), n, 4, ind.as_ptr(), y.as_ptr(), kind, &mut out) };
    assert_eq!(status, QtmleStatus::Ok);
    out
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(qtmle_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn tmle_estimate_round_trip() {
    let data = dataset(400, QtmleDataKind::MissingOutcome);
    assert_eq!(unsafe { qtmle_dataset_len(data) }, 400);
    let opts = QtmleEstimateOptions { grid_size: 200, ..qtmle_estimate_options_default() };
    let mut est = ptr::null_mut();
    assert_eq!(unsafe { qtmle_estimate(data, &opts, &mut est) }, QtmleStatus::Ok);

    let (mut value, mut se, mut lo, mut hi, mut p) = (0.0, 0.0, 0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(qtmle_estimate_value(est, &mut value), QtmleStatus::Ok);
        assert_eq!(qtmle_estimate_interval(est, &mut se, &mut lo, &mut hi), QtmleStatus::Ok);
        // only effects are tested against zero
        assert_eq!(qtmle_estimate_p_value(est, &mut p), QtmleStatus::NotAvailable);
    }
    assert!((value - 210.0).abs() < 8.0, "{value}");
    assert!(se > 0.0 && lo < value && value < hi);

    let (mut it, mut eps, mut resid, mut conv) = (0usize, 0.0, 0.0, false);
    let status = unsafe { qtmle_estimate_diagnostics(est, &mut it, &mut eps, &mut resid, &mut conv) };
    assert_eq!(status, QtmleStatus::Ok);
    assert!((1..=20).contains(&it));
    unsafe {
        qtmle_estimate_free(est);
        qtmle_dataset_free(data);
    }
}

#[test]
fn effect_comes_with_a_wald_test() {
    let data = dataset(400, QtmleDataKind::EffectOnTreated);
    let opts = QtmleEstimateOptions {
        estimand: QtmleEstimand::Effect,
        grid_size: 100,
        ..qtmle_estimate_options_default()
    };
    let mut est = ptr::null_mut();
    assert_eq!(unsafe { qtmle_estimate(data, &opts, &mut est) }, QtmleStatus::Ok);
    let (mut value, mut se, mut lo, mut hi, mut p) = (0.0, 0.0, 0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(qtmle_estimate_value(est, &mut value), QtmleStatus::Ok);
        assert_eq!(qtmle_estimate_interval(est, &mut se, &mut lo, &mut hi), QtmleStatus::Ok);
        assert_eq!(qtmle_estimate_p_value(est, &mut p), QtmleStatus::Ok);
    }
    // no shift was applied, so zero should sit inside the interval
    assert!(lo < 0.0 && 0.0 < hi, "[{lo}, {hi}]");
    assert!(p > 0.05 && p <= 1.0, "{p}");
    unsafe {
        qtmle_estimate_free(est);
        qtmle_dataset_free(data);
    }
}

#[test]
fn point_estimators_have_no_interval() {
    let data = dataset(200, QtmleDataKind::EffectOnTreated);
    let opts = QtmleEstimateOptions {
        estimand: QtmleEstimand::Effect,
        estimator: QtmleEstimator::Ipw,
        grid_size: 50,
        ..qtmle_estimate_options_default()
    };
    let mut est = ptr::null_mut();
    assert_eq!(unsafe { qtmle_estimate(data, &opts, &mut est) }, QtmleStatus::Ok);
    let (mut se, mut lo, mut hi) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { qtmle_estimate_interval(est, &mut se, &mut lo, &mut hi) }, QtmleStatus::NotAvailable);
    assert!(last_error().contains("no interval"));
    unsafe {
        qtmle_estimate_free(est);
        qtmle_dataset_free(data);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut out = ptr::null_mut();
    let status = unsafe {
        qtmle_dataset_new(ptr::null(), 3, 1, ptr::null(), ptr::null(), QtmleDataKind::MissingOutcome, &mut out)
    };
    assert_eq!(status, QtmleStatus::NullPointer);
    assert!(last_error().contains("covariates"));

    // observed unit with a NaN outcome
    let (cov, ind, y) = (vec![0.0, 1.0], vec![1u8, 1], vec![1.0, f64::NAN]);
    let status =
        unsafe { qtmle_dataset_new(cov.as_ptr(), 2, 1, ind.as_ptr(), y.as_ptr(), QtmleDataKind::MissingOutcome, &mut out) };
    assert_eq!(status, QtmleStatus::InvalidArgument);
    assert!(out.is_null());

    let data = dataset(100, QtmleDataKind::MissingOutcome);
    let opts = QtmleEstimateOptions { q: 1.5, ..qtmle_estimate_options_default() };
    let mut est = ptr::null_mut();
    assert_eq!(unsafe { qtmle_estimate(data, &opts, &mut est) }, QtmleStatus::InvalidArgument);
    assert!(last_error().contains("1.5"));

    // the missing-outcome estimand needs an observation indicator
    let opts = QtmleEstimateOptions { estimand: QtmleEstimand::Effect, ..qtmle_estimate_options_default() };
    assert_eq!(unsafe { qtmle_estimate(data, &opts, &mut est) }, QtmleStatus::InvalidArgument);
    unsafe { qtmle_dataset_free(data) };

    // freeing null is a no-op
    unsafe {
        qtmle_dataset_free(ptr::null_mut());
        qtmle_estimate_free(ptr::null_mut());
        qtmle_simulation_free(ptr::null_mut());
    }
}

#[test]
fn simulation_rows_match_the_library() {
    let opts = QtmleSimulationOptions {
        n: 80,
        reps: 3,
        scenarios: QTMLE_SCENARIO_A | QTMLE_SCENARIO_C,
        grid_size: 40,
        threads: 2,
        ..qtmle_simulation_options_default()
    };
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { qtmle_simulate(&opts, &mut sim) }, QtmleStatus::Ok);
    let count = unsafe { qtmle_simulation_row_count(sim) };
    assert_eq!(count, 10);

    let spec = qtmle::sim::ScenarioSpec {
        n: 80,
        reps: 3,
        scenarios: vec![qtmle::sim::Scenario::A, qtmle::sim::Scenario::C],
        grid_size: 40,
        ..Default::default()
    };
    let direct = qtmle::sim::run_monte_carlo(&spec).unwrap();
    for (i, want) in direct.rows.iter().enumerate() {
        let mut row = std::mem::MaybeUninit::<QtmleSummaryRow>::uninit();
        assert_eq!(unsafe { qtmle_simulation_row(sim, i, row.as_mut_ptr()) }, QtmleStatus::Ok);
        let row = unsafe { row.assume_init() };
        assert_eq!(row.rmse, want.rmse);
        assert_eq!(row.bias, want.bias);
        assert_eq!(row.reps, want.reps);
        assert_eq!(row.coverage.is_nan(), want.coverage.is_none());
        assert_eq!(row.scenario as u8, want.scenario.to_string().as_bytes()[0]);
    }
    let mut row = std::mem::MaybeUninit::<QtmleSummaryRow>::uninit();
    assert_eq!(unsafe { qtmle_simulation_row(sim, count, row.as_mut_ptr()) }, QtmleStatus::InvalidArgument);
    unsafe { qtmle_simulation_free(sim) };
}

/// Compiles a C program against the generated header and the static
/// library, then runs it.
#[test]
fn header_compiles_and_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap().to_path_buf();
    let staticlib = lib_dir.join("libqtmle_ffi.a");
    assert!(staticlib.exists(), "missing {}", staticlib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <math.h>
#include <stdio.h>
#include "qtmle.h"

int main(void) {
    double cov[40], y[40];
    uint8_t m[40];
    for (int i = 0; i < 40; i++) {
        cov[i] = (double)(i % 7) - 3.0;
        m[i] = (uint8_t)(i % 3 != 0);
        y[i] = m[i] ? 2.0 * cov[i] + 0.1 * (double)(i % 5) : NAN;
    }
    QtmleDataset *d = NULL;
    if (qtmle_dataset_new(cov, 40, 1, m, y, QTMLE_DATA_KIND_MISSING_OUTCOME, &d) != QTMLE_STATUS_OK) return 1;
    QtmleEstimateOptions o = qtmle_estimate_options_default();
    o.estimator = QTMLE_ESTIMATOR_OD;
    o.grid_size = 20;
    QtmleEstimate *e = NULL;
    if (qtmle_estimate(d, &o, &e) != QTMLE_STATUS_OK) { fprintf(stderr, "%s\n", qtmle_last_error_message()); return 2; }
    double v = NAN;
    if (qtmle_estimate_value(e, &v) != QTMLE_STATUS_OK || isnan(v)) return 3;
    double se, lo, hi;
    if (qtmle_estimate_interval(e, &se, &lo, &hi) != QTMLE_STATUS_NOT_AVAILABLE) return 4;
    printf("%s %.6f\n", qtmle_version(), v);
    qtmle_estimate_free(e);
    qtmle_dataset_free(d);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler runs");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with(env!("CARGO_PKG_VERSION")), "{text}");
}
