//! Influence functions, density at the quantile and Wald intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{Dataset, EstimandKind, Propensity, PROPENSITY_FLOOR};
use crate::distribution::{AtomOrder, GridDistribution, MarginalCdf, UnitWeights};
use crate::error::{Error, Result, Warning};
use crate::estimators::{EffectFit, TmleDiagnostics, TmleFit};

/// Lower bound on the density estimate at the quantile.
pub const DENSITY_FLOOR: f64 = 1e-8;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-sided normal critical value for a confidence level in (0, 1).
pub fn critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} is outside (0, 1)")));
    }
    Ok(std_normal().inverse_cdf(0.5 * (1.0 + level)))
}

/// Gaussian kernel density of the marginal at `at`, bandwidth
/// `1.06 * sd * n^(-1/5)`.
///
/// Returns the floored value and whether the floor was hit.
pub fn kde_density(marginal: &MarginalCdf, at: f64, n: usize) -> (f64, bool) {
    let locs = marginal.locations();
    let mass = marginal.masses();
    let mean: f64 = locs.iter().zip(mass).map(|(l, m)| l * m).sum();
    let var: f64 = locs.iter().zip(mass).map(|(l, m)| m * (l - mean) * (l - mean)).sum();
    let h = 1.06 * var.max(0.0).sqrt() * (n as f64).powf(-0.2);
    if !(h > 0.0) {
        return (DENSITY_FLOOR, true);
    }
    // kernel weight beyond 9 bandwidths is below 1e-17 relative
    let lo = locs.partition_point(|&l| l < at - 9.0 * h);
    let hi = locs.partition_point(|&l| l <= at + 9.0 * h);
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    let f: f64 = (lo..hi)
        .map(|j| {
            let u = (at - locs[j]) / h;
            mass[j] * (-0.5 * u * u).exp()
        })
        .sum::<f64>()
        * norm;
    if f < DENSITY_FLOOR {
        (DENSITY_FLOOR, true)
    } else {
        (f, false)
    }
}

/// Influence function values of the targeted estimator, one per unit.
#[derive(Debug, Clone)]
pub struct Influence {
    pub values: Vec<f64>,
    pub density: f64,
    pub warnings: Vec<Warning>,
}

fn marginal_of(grid: &GridDistribution, order: Option<&AtomOrder>, omega: &[f64]) -> Result<MarginalCdf> {
    match order {
        Some(o) => Ok(o.marginal(grid.weights(), omega)),
        None => crate::distribution::marginal_cdf(grid, UnitWeights::Custom(omega)),
    }
}

fn density_term(
    grid: &GridDistribution,
    order: Option<&AtomOrder>,
    omega: &[f64],
    theta: f64,
    n: usize,
    warnings: &mut Vec<Warning>,
) -> Result<f64> {
    let marginal = marginal_of(grid, order, omega)?;
    let (f, floored) = kde_density(&marginal, theta, n);
    if floored {
        warnings.push(Warning::DensityFloor);
    }
    Ok(f)
}

/// `-(1/f) [ (M/e)(1{Y <= theta} - G(theta|X)) + G(theta|X) - q ]` for a
/// missing-outcome dataset, evaluated at the targeted conditional
/// distribution. `order` may be any atom order built from a grid with the same
/// atoms.
pub fn eif_missing(
    data: &Dataset,
    propensity: &Propensity,
    grid: &GridDistribution,
    order: Option<&AtomOrder>,
    theta: f64,
    q: f64,
) -> Result<Influence> {
    if data.kind() != EstimandKind::MissingOutcome {
        return Err(Error::invalid("eif_missing needs a missing-outcome dataset"));
    }
    let n = data.n();
    if propensity.len() != n || grid.n_rows() != n {
        return Err(Error::invalid("nuisance fits are not aligned with the dataset"));
    }
    let mut warnings = Vec::new();
    let omega = UnitWeights::Uniform.normalized(n)?;
    let f = density_term(grid, order, &omega, theta, n, &mut warnings)?;
    let values = (0..n)
        .map(|i| {
            let g = grid.row_cdf(i, theta);
            let resid = if data.indicator()[i] {
                let ind = if data.outcome()[i] <= theta { 1.0 } else { 0.0 };
                (ind - g) / propensity.values()[i]
            } else {
                0.0
            };
            -(resid + g - q) / f
        })
        .collect();
    Ok(Influence { values, density: f, warnings })
}

/// `-(1/f) [ (1-T)/p * e/(1-e) (1{Y <= theta} - G) + T/p (G - q) ]` with `p`
/// the treated fraction.
pub fn eif_att(
    data: &Dataset,
    propensity: &Propensity,
    grid: &GridDistribution,
    order: Option<&AtomOrder>,
    theta: f64,
    q: f64,
) -> Result<Influence> {
    if data.kind() != EstimandKind::EffectOnTreated {
        return Err(Error::invalid("eif_att needs an effect-on-treated dataset"));
    }
    let n = data.n();
    if propensity.len() != n || grid.n_rows() != n {
        return Err(Error::invalid("nuisance fits are not aligned with the dataset"));
    }
    let treated = data.count_indicated();
    if treated == 0 {
        return Err(Error::invalid("no treated units"));
    }
    let p = treated as f64 / n as f64;
    let mut warnings = Vec::new();
    let omega = UnitWeights::Custom(&data.indicator_f64()).normalized(n)?;
    let f = density_term(grid, order, &omega, theta, treated, &mut warnings)?;
    let values = (0..n)
        .map(|i| {
            let g = grid.row_cdf(i, theta);
            let term = if data.indicator()[i] {
                (g - q) / p
            } else {
                let e = propensity.values()[i].min(1.0 - PROPENSITY_FLOOR);
                let ind = if data.outcome()[i] <= theta { 1.0 } else { 0.0 };
                e / (1.0 - e) * (ind - g) / p
            };
            -term / f
        })
        .collect();
    Ok(Influence { values, density: f, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub degenerate: bool,
}

/// `estimate ± z * sd(eif) / sqrt(n)` with the `n - 1` sample standard deviation.
pub fn wald_interval(estimate: f64, eif: &[f64], level: f64) -> Result<WaldInterval> {
    let n = eif.len();
    if n < 2 {
        return Err(Error::invalid("need at least two influence values"));
    }
    let z = critical_value(level)?;
    let mean = eif.iter().sum::<f64>() / n as f64;
    let var = eif.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    Ok(WaldInterval { se, lower: estimate - z * se, upper: estimate + z * se, level, degenerate: se == 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided test of a zero effect.
pub fn wald_test(estimate: f64, se: f64) -> WaldTest {
    if se == 0.0 {
        let p_value = if estimate == 0.0 { 1.0 } else { 0.0 };
        let z = if estimate == 0.0 { 0.0 } else { estimate.signum() * f64::INFINITY };
        return WaldTest { z, p_value };
    }
    let z = estimate / se;
    WaldTest { z, p_value: 2.0 * std_normal().cdf(-z.abs()) }
}

/// Point estimate with optional interval and diagnostics, as printed by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub q: f64,
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval: Option<WaldInterval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<WaldTest>,
    pub warnings: Vec<Warning>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<TmleDiagnostics>,
}

impl EstimateReport {
    pub fn point(estimator: &str, q: f64, estimate: f64, warning: Option<Warning>) -> Self {
        Self {
            estimator: estimator.to_string(),
            q,
            estimate,
            interval: None,
            test: None,
            warnings: warning.into_iter().collect(),
            diagnostics: None,
        }
    }
}

fn push_unique(warnings: &mut Vec<Warning>, extra: impl IntoIterator<Item = Warning>) {
    for w in extra {
        if !warnings.contains(&w) {
            warnings.push(w);
        }
    }
}

fn tmle_warnings(d: &TmleDiagnostics) -> Vec<Warning> {
    if d.converged {
        Vec::new()
    } else {
        vec![Warning::IterationCap]
    }
}

/// Report for a targeted fit on a missing-outcome or effect-on-treated dataset.
pub fn tmle_report(
    estimator: &str,
    data: &Dataset,
    propensity: &Propensity,
    fit: &TmleFit,
    order: Option<&AtomOrder>,
    q: f64,
    level: f64,
) -> Result<EstimateReport> {
    let influence = match data.kind() {
        EstimandKind::MissingOutcome => eif_missing(data, propensity, &fit.grid, order, fit.theta, q)?,
        EstimandKind::EffectOnTreated => eif_att(data, propensity, &fit.grid, order, fit.theta, q)?,
    };
    let interval = wald_interval(fit.theta, &influence.values, level)?;
    let mut warnings = tmle_warnings(&fit.diagnostics);
    push_unique(&mut warnings, influence.warnings);
    if interval.degenerate {
        push_unique(&mut warnings, [Warning::DegenerateInterval]);
    }
    Ok(EstimateReport {
        estimator: estimator.to_string(),
        q,
        estimate: fit.theta,
        interval: Some(interval),
        test: None,
        warnings,
        diagnostics: Some(fit.diagnostics.clone()),
    })
}

/// Influence values of an effect estimate: per-unit difference of the two
/// arm influence functions.
pub fn effect_influence(
    data: &Dataset,
    fit: &EffectFit,
    e_treated: &Propensity,
    e_control: &Propensity,
    orders: (Option<&AtomOrder>, Option<&AtomOrder>),
    q: f64,
) -> Result<Influence> {
    let d1 = eif_missing(&data.arm(true)?, e_treated, &fit.treated.grid, orders.0, fit.treated.theta, q)?;
    let d0 = eif_missing(&data.arm(false)?, e_control, &fit.control.grid, orders.1, fit.control.theta, q)?;
    let mut warnings = d1.warnings;
    push_unique(&mut warnings, d0.warnings);
    Ok(Influence {
        values: d1.values.iter().zip(&d0.values).map(|(a, b)| a - b).collect(),
        density: f64::NAN,
        warnings,
    })
}

/// Report for the quantile treatment effect with a Wald test of no effect.
pub fn effect_report(
    data: &Dataset,
    fit: &EffectFit,
    e_treated: &Propensity,
    e_control: &Propensity,
    orders: (Option<&AtomOrder>, Option<&AtomOrder>),
    q: f64,
    level: f64,
) -> Result<EstimateReport> {
    let influence = effect_influence(data, fit, e_treated, e_control, orders, q)?;
    let interval = wald_interval(fit.effect, &influence.values, level)?;
    let mut warnings = tmle_warnings(&fit.treated.diagnostics);
    push_unique(&mut warnings, tmle_warnings(&fit.control.diagnostics));
    push_unique(&mut warnings, influence.warnings);
    if interval.degenerate {
        push_unique(&mut warnings, [Warning::DegenerateInterval]);
    }
    Ok(EstimateReport {
        estimator: "tmle".into(),
        q,
        estimate: fit.effect,
        interval: Some(interval),
        test: Some(wald_test(fit.effect, interval.se)),
        warnings,
        diagnostics: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn critical_value_at_95() {
        assert!((critical_value(0.95).unwrap() - 1.959964).abs() < 1e-6);
        assert!(critical_value(1.0).is_err());
    }

    #[test]
    fn kde_two_atoms_by_hand() {
        let m = MarginalCdf::from_atoms(vec![(0.0, 0.5), (2.0, 0.5)]).unwrap();
        let n = 32;
        let h = 1.06 * 1.0 * (n as f64).powf(-0.2);
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = 0.5 * (phi(0.5 / h) + phi(-1.5 / h)) / h;
        let (f, floored) = kde_density(&m, 0.5, n);
        assert!(!floored);
        assert!((f - expected).abs() < 1e-15);
    }

    #[test]
    fn kde_floor_for_point_mass() {
        let m = MarginalCdf::from_atoms(vec![(3.0, 1.0)]).unwrap();
        assert_eq!(kde_density(&m, 3.0, 10), (DENSITY_FLOOR, true));
        let m = MarginalCdf::from_atoms(vec![(0.0, 0.5), (1.0, 0.5)]).unwrap();
        assert_eq!(kde_density(&m, 1e6, 10), (DENSITY_FLOOR, true));
    }

    #[test]
    fn kde_recovers_normal_density() {
        let levels = crate::nuisance::standard_normal_levels(2000);
        let m = MarginalCdf::from_atoms(levels.iter().map(|&l| (l, 1.0)).collect()).unwrap();
        let (f, _) = kde_density(&m, 0.0, 100_000);
        assert!((f - 0.398_942).abs() < 0.01, "{f}");
    }

    #[test]
    fn wald_interval_by_hand() {
        let eif = [1.0, -1.0, 2.0, -2.0];
        // sample variance 10/3
        let w = wald_interval(5.0, &eif, 0.95).unwrap();
        let se = (10.0 / 3.0 / 4.0f64).sqrt();
        assert!((w.se - se).abs() < 1e-15);
        assert!((w.upper - 5.0 - 1.959963984540054 * se).abs() < 1e-12);
        assert!(!w.degenerate);
        assert!(wald_interval(1.0, &[0.5; 5], 0.9).unwrap().degenerate);
    }

    #[test]
    fn wald_test_symmetry() {
        let t = wald_test(1.959963984540054, 1.0);
        assert!((t.p_value - 0.05).abs() < 1e-9, "{}", t.p_value);
        assert_eq!(wald_test(0.0, 0.0).p_value, 1.0);
        assert_eq!(wald_test(-1.0, 2.0).p_value, wald_test(1.0, 2.0).p_value);
    }
}
