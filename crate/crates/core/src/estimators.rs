//! Quantile estimators for an outcome missing at random and for the control
//! quantile among the treated.
//!
//! The targeted estimator tilts the per-unit grid weights along the
//! exponential submodel `g_eps ∝ exp(eps * H) g`, where the clever covariate
//! is `H(y, x) = c(x) (1{y <= theta} - G(theta | x))`. On a grid, `H` takes
//! only two values per row (atoms at or below `theta`, atoms above), so the
//! one-dimensional likelihood and its derivatives are O(n) to evaluate and
//! the weight update needs two exponentials per row.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EstimandKind, NuisancePair, Propensity};
use crate::distribution::{check_level, first_reaching, reaches, AtomOrder, GridDistribution, UnitWeights};
use crate::error::{Error, Result, Warning};

/// Hard cap on targeting iterations.
pub const MAX_TMLE_ITERATIONS: usize = 20;

/// Stopping threshold on the fluctuation parameter, `1e-4 * n^-0.6`.
pub fn epsilon_tolerance(n: usize) -> f64 {
    1e-4 * (n as f64).powf(-0.6)
}

/// Root of a step-function estimating equation, with a warning when no
/// sign change exists over the candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootEstimate {
    pub theta: f64,
    pub warning: Option<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmleDiagnostics {
    pub iterations: usize,
    pub final_epsilon: f64,
    /// Absolute value of the empirical mean of the estimating function at exit.
    pub score_residual: f64,
    pub converged: bool,
    /// Fitted fluctuation parameter of each iteration.
    pub epsilons: Vec<f64>,
    /// Quantile before the first iteration and after each one.
    pub thetas: Vec<f64>,
    /// Cumulative tilted log-likelihood gain relative to the initial fit,
    /// starting at 0 before the first iteration.
    pub log_likelihood: Vec<f64>,
}

impl TmleDiagnostics {
    pub fn likelihood_nondecreasing(&self) -> bool {
        self.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0))
    }
}

#[derive(Debug, Clone)]
pub struct TmleFit {
    pub theta: f64,
    /// Targeted conditional distribution.
    pub grid: GridDistribution,
    pub diagnostics: TmleDiagnostics,
}

fn check_grid(data: &Dataset, grid: &GridDistribution) -> Result<()> {
    if grid.n_rows() != data.n() {
        return Err(Error::invalid(format!(
            "grid has {} rows, dataset has {} units",
            grid.n_rows(),
            data.n()
        )));
    }
    Ok(())
}

fn check_order(order: &AtomOrder, grid: &GridDistribution) -> Result<()> {
    if order.len() != grid.n_rows() * grid.n_atoms() {
        return Err(Error::invalid("atom order was built for a different grid"));
    }
    Ok(())
}

/// Unit weights of the marginal CDF for the dataset's estimand.
fn marginal_unit_weights(data: &Dataset) -> Result<Vec<f64>> {
    match data.kind() {
        EstimandKind::MissingOutcome => UnitWeights::Uniform.normalized(data.n()),
        EstimandKind::EffectOnTreated => UnitWeights::Custom(&data.indicator_f64())
            .normalized(data.n())
            .map_err(|e| match e {
                Error::ZeroWeights => Error::invalid("no treated units"),
                other => other,
            }),
    }
}

/// Plug-in quantile of the model-implied marginal CDF.
pub fn estimate_od(data: &Dataset, grid: &GridDistribution, q: f64) -> Result<f64> {
    check_grid(data, grid)?;
    estimate_od_with_order(data, grid, &AtomOrder::new(grid), q)
}

pub fn estimate_od_with_order(
    data: &Dataset,
    grid: &GridDistribution,
    order: &AtomOrder,
    q: f64,
) -> Result<f64> {
    check_level(q)?;
    check_grid(data, grid)?;
    check_order(order, grid)?;
    let omega = marginal_unit_weights(data)?;
    Ok(order.quantile(grid.weights(), &omega, q))
}

fn inverse_weights(data: &Dataset, e: &Propensity) -> Result<Vec<f64>> {
    if e.len() != data.n() {
        return Err(Error::invalid("propensity length does not match the dataset"));
    }
    Ok(data
        .indicator()
        .iter()
        .zip(e.values())
        .map(|(&m, &p)| if m { 1.0 / p } else { 0.0 })
        .collect())
}

fn observed_points(data: &Dataset, h: &[f64]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = data
        .indicator()
        .iter()
        .zip(data.outcome())
        .zip(h)
        .filter(|((&m, _), _)| m)
        .map(|((_, &y), &w)| (y, w))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

/// Smallest observed `y` with `(1/n) sum_i (M_i / e_i) 1{Y_i <= y} >= q`.
pub fn estimate_ipw(data: &Dataset, e: &Propensity, q: f64) -> Result<RootEstimate> {
    check_level(q)?;
    let h = inverse_weights(data, e)?;
    let pts = observed_points(data, &h);
    if pts.is_empty() {
        return Err(Error::invalid("no observed outcomes"));
    }
    Ok(match first_reaching(&pts, q, data.n() as f64) {
        Some(theta) => RootEstimate { theta, warning: None },
        None => RootEstimate { theta: pts[pts.len() - 1].0, warning: Some(Warning::InsufficientWeight) },
    })
}

/// Minimizer of the inverse-weighted check loss: the self-normalized
/// weighted quantile of the observed outcomes.
pub fn estimate_firpo(data: &Dataset, e: &Propensity, q: f64) -> Result<f64> {
    check_level(q)?;
    let h = inverse_weights(data, e)?;
    let pts = observed_points(data, &h);
    let (y, w): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    crate::distribution::weighted_quantile(&y, &w, q)
}

/// Root of the augmented inverse weighted estimating equation
/// `(1/n) sum_i [h_i (1{Y_i <= t} - G_i(t)) + G_i(t)] - q`, taken as the first
/// pooled candidate (observed outcomes and grid atoms) where it becomes
/// nonnegative.
pub fn estimate_aipw(data: &Dataset, nuis: &NuisancePair, q: f64) -> Result<RootEstimate> {
    check_grid(data, &nuis.conditional)?;
    estimate_aipw_with_order(data, nuis, &AtomOrder::new(&nuis.conditional), q)
}

pub fn estimate_aipw_with_order(
    data: &Dataset,
    nuis: &NuisancePair,
    order: &AtomOrder,
    q: f64,
) -> Result<RootEstimate> {
    check_level(q)?;
    nuis.check_aligned(data)?;
    let grid = &nuis.conditional;
    check_grid(data, grid)?;
    check_order(order, grid)?;
    if data.kind() != EstimandKind::MissingOutcome {
        return Err(Error::invalid("AIPW is defined for the missing-outcome estimand"));
    }
    let h = inverse_weights(data, &nuis.propensity)?;
    let obs = observed_points(data, &h);
    let weights = grid.weights();
    let target = data.n() as f64;

    // Merge the sorted atoms with the sorted observed outcomes; the equation
    // is scaled by n so weights stay exact for unit inverse weights.
    let mut atoms = order.iter().peekable();
    let mut oi = 0;
    let mut cum = 0.0;
    let mut last = f64::NEG_INFINITY;
    loop {
        let next_atom = atoms.peek().map(|a| a.0);
        let next_obs = obs.get(oi).map(|p| p.0);
        let y = match (next_atom, next_obs) {
            (None, None) => break,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (Some(a), Some(b)) => a.min(b),
        };
        while let Some(&(loc, row, flat)) = atoms.peek() {
            if loc != y {
                break;
            }
            cum += (1.0 - h[row]) * weights[flat];
            atoms.next();
        }
        while oi < obs.len() && obs[oi].0 == y {
            cum += obs[oi].1;
            oi += 1;
        }
        last = y;
        if reaches(cum, q, target) {
            return Ok(RootEstimate { theta: y, warning: None });
        }
    }
    Ok(RootEstimate { theta: last, warning: Some(Warning::NoSignChange) })
}

/// Per-unit inputs of the targeting loop.
struct Targeting<'a> {
    n: usize,
    q: f64,
    /// Likelihood weight: 1 for units whose outcome enters the fluctuation fit.
    lik: Vec<f64>,
    /// Clever-covariate multiplier `c(x)`.
    clever: Vec<f64>,
    /// Normalized marginal weights.
    omega: Vec<f64>,
    /// Multiplier of the residual term in the reported estimating function.
    residual_scale: f64,
    outcome: &'a [f64],
    grid: &'a GridDistribution,
    order: &'a AtomOrder,
}

/// Per-row quantities for the fluctuation fit at fixed theta.
struct RowTerm {
    lik: f64,
    clever: f64,
    below: f64,
    observed_score: f64,
}

impl RowTerm {
    /// Tilted mass at or below theta, `G / (G + (1 - G) exp(-eps c))`.
    #[inline]
    fn tilted_below(&self, eps: f64) -> f64 {
        let (g, t) = (self.below, eps * self.clever);
        if g <= 0.0 {
            return 0.0;
        }
        if g >= 1.0 {
            return 1.0;
        }
        if t >= 0.0 {
            g / (g + (1.0 - g) * (-t).exp())
        } else {
            let et = t.exp();
            g * et / (g * et + 1.0 - g)
        }
    }

    /// `log sum_k exp(eps * H_k) w_k` for the row.
    #[inline]
    fn log_normalizer(&self, eps: f64) -> f64 {
        let (g, c) = (self.below, self.clever);
        let a = c * (1.0 - g);
        let b = -c * g;
        if g <= 0.0 {
            return eps * b;
        }
        if g >= 1.0 {
            return eps * a;
        }
        let t = eps * c;
        if t >= 0.0 {
            eps * a + (g + (1.0 - g) * (-t).exp()).ln()
        } else {
            eps * b + (g * t.exp() + 1.0 - g).ln()
        }
    }
}

struct FluctuationObjective<'a> {
    rows: &'a [RowTerm],
    n: f64,
}

impl FluctuationObjective<'_> {
    fn value(&self, eps: f64) -> f64 {
        self.rows
            .iter()
            .map(|r| r.lik * (eps * r.observed_score - r.log_normalizer(eps)))
            .sum::<f64>()
            / self.n
    }

    fn gradient(&self, eps: f64) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let b = -r.clever * r.below;
                r.lik * (r.observed_score - b - r.clever * r.tilted_below(eps))
            })
            .sum::<f64>()
            / self.n
    }

    fn hessian(&self, eps: f64) -> f64 {
        -self
            .rows
            .iter()
            .map(|r| {
                let s = r.tilted_below(eps);
                r.lik * r.clever * r.clever * s * (1.0 - s)
            })
            .sum::<f64>()
            / self.n
    }

    /// Maximizer of the concave objective by Newton's method, safeguarded by
    /// a sign-change bracket on the gradient.
    fn maximize(&self) -> std::result::Result<f64, String> {
        let g0 = self.gradient(0.0);
        if g0 == 0.0 {
            return Ok(0.0);
        }
        let dir = g0.signum();
        let h0 = self.hessian(0.0);
        let mut reach = if h0 < 0.0 { (g0 / h0).abs() } else { 1.0 };
        if !reach.is_finite() || reach == 0.0 {
            reach = 1.0;
        }
        // grow until the gradient changes sign
        let mut far = dir * reach;
        let mut near = 0.0;
        let mut found = false;
        for _ in 0..200 {
            let g = self.gradient(far);
            if !g.is_finite() {
                return Err(format!("non-finite gradient at eps = {far}"));
            }
            if g == 0.0 && self.hessian(far) == 0.0 {
                // every tilted probability has saturated: the supremum is
                // finite and reached in the limit, which `far` represents
                return Ok(far);
            }
            if g * dir <= 0.0 {
                found = true;
                break;
            }
            near = far;
            far *= 2.0;
            if far.abs() > 1e300 {
                break;
            }
        }
        if !found {
            return Err("likelihood increases without bound".into());
        }
        let (mut lo, mut hi) = if dir > 0.0 { (near, far) } else { (far, near) };
        let mut eps = 0.5 * (lo + hi);
        for _ in 0..300 {
            let g = self.gradient(eps);
            if g == 0.0 {
                return Ok(eps);
            }
            if g > 0.0 {
                lo = eps;
            } else {
                hi = eps;
            }
            let h = self.hessian(eps);
            let newton = if h < 0.0 { eps - g / h } else { f64::NAN };
            let next = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - eps).abs() <= 1e-15 * eps.abs().max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * eps.abs() {
                return Ok(next);
            }
            eps = next;
        }
        Ok(eps)
    }
}

impl Targeting<'_> {
    /// Row masses at or below theta. A side with no mass gives exactly 0 or
    /// 1, so rounding in the row sum cannot leave an empty side to rescale.
    fn row_below(&self, weights: &[f64], theta: f64) -> Vec<f64> {
        let k = self.grid.n_atoms();
        (0..self.n)
            .map(|i| {
                let (mut below, mut above) = (0.0, 0.0);
                for (&a, &w) in self.grid.row_atoms(i).iter().zip(&weights[i * k..(i + 1) * k]) {
                    if a <= theta {
                        below += w;
                    } else {
                        above += w;
                    }
                }
                if above == 0.0 {
                    1.0
                } else if below == 0.0 {
                    0.0
                } else {
                    below / (below + above)
                }
            })
            .collect()
    }

    /// Fluctuation terms at `theta`. A row whose observed outcome falls on a
    /// side of `theta` where the row has no mass has a side likelihood of
    /// zero for every `eps`; it carries no information about `eps` and its
    /// linear term would make the objective unbounded, so it is left out of
    /// the fit (but not out of the score residual).
    fn rows(&self, below: &[f64], theta: f64) -> Vec<RowTerm> {
        (0..self.n)
            .map(|i| {
                let mut lik = self.lik[i];
                let observed_score = if lik > 0.0 {
                    let ind = if self.outcome[i] <= theta { 1.0 } else { 0.0 };
                    if (ind == 1.0 && below[i] <= 0.0) || (ind == 0.0 && below[i] >= 1.0) {
                        lik = 0.0;
                    }
                    self.clever[i] * (ind - below[i])
                } else {
                    0.0
                };
                RowTerm { lik, clever: self.clever[i], below: below[i], observed_score }
            })
            .collect()
    }

    /// `|(1/n) sum_i [s * lik_i c_i (1{Y_i <= theta} - G_i) + n omega_i (G_i - q)]|`.
    fn score_residual(&self, weights: &[f64], theta: f64) -> f64 {
        let below = self.row_below(weights, theta);
        let rows = self.rows(&below, theta);
        let nf = self.n as f64;
        let total: f64 = rows
            .iter()
            .zip(&self.omega)
            .zip(&below)
            .zip(&self.lik)
            .map(|(((r, &w), &g), &lik)| self.residual_scale * lik * r.observed_score + nf * w * (g - self.q))
            .sum();
        (total / nf).abs()
    }

    fn run(&self) -> Result<TmleFit> {
        let k = self.grid.n_atoms();
        let tol = epsilon_tolerance(self.n);
        let mut weights = self.grid.weights().to_vec();
        let mut theta = self.order.quantile(&weights, &self.omega, self.q);
        let mut epsilons = Vec::new();
        let mut thetas = vec![theta];
        let mut log_likelihood = vec![0.0];
        let mut converged = false;

        for iteration in 1..=MAX_TMLE_ITERATIONS {
            let below = self.row_below(&weights, theta);
            let rows = self.rows(&below, theta);
            let objective = FluctuationObjective { rows: &rows, n: self.n as f64 };
            let eps = objective
                .maximize()
                .map_err(|reason| Error::Fluctuation { iteration, reason })?;
            let gain = objective.value(eps);
            if eps != 0.0 {
                for (i, r) in rows.iter().enumerate() {
                    let s = r.tilted_below(eps);
                    let g = r.below;
                    if g <= 0.0 || g >= 1.0 {
                        continue;
                    }
                    // mass ratios for atoms at/below and above theta
                    let up = s / g;
                    let down = (1.0 - s) / (1.0 - g);
                    let row = &mut weights[i * k..(i + 1) * k];
                    let atoms = self.grid.row_atoms(i);
                    let mut sum = 0.0;
                    for (w, &a) in row.iter_mut().zip(atoms) {
                        *w *= if a <= theta { up } else { down };
                        sum += *w;
                    }
                    if !(sum > 0.0 && sum.is_finite()) {
                        return Err(Error::Fluctuation {
                            iteration,
                            reason: format!("row {i} lost all mass under eps = {eps}"),
                        });
                    }
                    row.iter_mut().for_each(|w| *w /= sum);
                }
            }
            epsilons.push(eps);
            log_likelihood.push(log_likelihood.last().unwrap() + gain);
            let next = self.order.quantile(&weights, &self.omega, self.q);
            let stable = next == theta;
            theta = next;
            thetas.push(theta);
            if eps.abs() < tol && stable {
                converged = true;
                break;
            }
        }

        let score_residual = self.score_residual(&weights, theta);
        let grid = self.grid.reweighted(weights)?;
        Ok(TmleFit {
            theta,
            grid,
            diagnostics: TmleDiagnostics {
                iterations: epsilons.len(),
                final_epsilon: *epsilons.last().unwrap_or(&0.0),
                score_residual,
                converged,
                epsilons,
                thetas,
                log_likelihood,
            },
        })
    }
}

/// Targeted estimator of the `q`-quantile of an outcome missing at random.
pub fn tmle_missing(data: &Dataset, nuis: &NuisancePair, q: f64) -> Result<TmleFit> {
    check_grid(data, &nuis.conditional)?;
    tmle_missing_with_order(data, nuis, &AtomOrder::new(&nuis.conditional), q)
}

pub fn tmle_missing_with_order(
    data: &Dataset,
    nuis: &NuisancePair,
    order: &AtomOrder,
    q: f64,
) -> Result<TmleFit> {
    check_level(q)?;
    nuis.check_aligned(data)?;
    check_grid(data, &nuis.conditional)?;
    check_order(order, &nuis.conditional)?;
    if data.kind() != EstimandKind::MissingOutcome {
        return Err(Error::invalid("tmle_missing needs a missing-outcome dataset"));
    }
    if data.count_indicated() == 0 {
        return Err(Error::invalid("no observed outcomes"));
    }
    let n = data.n();
    Targeting {
        n,
        q,
        lik: data.indicator_f64(),
        clever: nuis.propensity.values().iter().map(|e| 1.0 / e).collect(),
        omega: UnitWeights::Uniform.normalized(n)?,
        residual_scale: 1.0,
        outcome: data.outcome(),
        grid: &nuis.conditional,
        order,
    }
    .run()
}

/// Targeted estimator of the `q`-quantile of the control potential outcome
/// among treated units. `nuis.conditional` must describe `Y | T = 0, X` and
/// `nuis.propensity` is `P(T = 1 | X)`, bounded away from 1.
pub fn tmle_att(data: &Dataset, nuis: &NuisancePair, q: f64) -> Result<TmleFit> {
    check_grid(data, &nuis.conditional)?;
    tmle_att_with_order(data, nuis, &AtomOrder::new(&nuis.conditional), q)
}

pub fn tmle_att_with_order(
    data: &Dataset,
    nuis: &NuisancePair,
    order: &AtomOrder,
    q: f64,
) -> Result<TmleFit> {
    check_level(q)?;
    nuis.check_aligned(data)?;
    check_grid(data, &nuis.conditional)?;
    check_order(order, &nuis.conditional)?;
    if data.kind() != EstimandKind::EffectOnTreated {
        return Err(Error::invalid("tmle_att needs an effect-on-treated dataset"));
    }
    let n = data.n();
    let treated = data.count_indicated();
    if treated == 0 {
        return Err(Error::invalid("no treated units"));
    }
    if treated == n {
        return Err(Error::invalid("no control units"));
    }
    let p_treated = treated as f64 / n as f64;
    let clever = nuis
        .propensity
        .values()
        .iter()
        .map(|&e| {
            let e = e.min(1.0 - crate::dataset::PROPENSITY_FLOOR);
            e / (1.0 - e)
        })
        .collect();
    Targeting {
        n,
        q,
        lik: data.indicator().iter().map(|&t| if t { 0.0 } else { 1.0 }).collect(),
        clever,
        omega: marginal_unit_weights(data)?,
        residual_scale: 1.0 / p_treated,
        outcome: data.outcome(),
        grid: &nuis.conditional,
        order,
    }
    .run()
}

#[derive(Debug, Clone)]
pub struct EffectFit {
    pub effect: f64,
    pub treated: TmleFit,
    pub control: TmleFit,
}

/// Difference of arm-wise targeted quantiles. `arm1.propensity` is
/// `P(T = 1 | X)` and `arm0.propensity` is `P(T = 0 | X)`; each grid describes
/// its own arm's outcome given covariates.
pub fn effect_on_quantile(data: &Dataset, arm1: &NuisancePair, arm0: &NuisancePair, q: f64) -> Result<EffectFit> {
    let treated = tmle_missing(&data.arm(true)?, arm1, q)?;
    let control = tmle_missing(&data.arm(false)?, arm0, q)?;
    Ok(EffectFit { effect: treated.theta - control.theta, treated, control })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn missing(y: &[f64], m: &[bool]) -> Dataset {
        let n = y.len();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let y = y.iter().zip(m).map(|(&v, &o)| if o { v } else { f64::NAN }).collect();
        Dataset::new(x, m.to_vec(), y, EstimandKind::MissingOutcome).unwrap()
    }

    fn ones(n: usize) -> Propensity {
        Propensity::new(vec![1.0; n]).unwrap()
    }

    /// `inf{y : j / n >= q}` over the sorted sample, counted the same way the
    /// estimators count.
    fn sample_quantile(y: &[f64], q: f64) -> f64 {
        let mut s = y.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let mut j = 0.0;
        for v in &s {
            j += 1.0;
            if j >= q * n {
                return *v;
            }
        }
        *s.last().unwrap()
    }

    #[test]
    fn od_on_empirical_grid_is_sample_quantile() {
        let y = [3.0, 1.0, 4.0, 1.5, 9.0];
        let mut sorted = y.to_vec();
        sorted.sort_by(f64::total_cmp);
        let atoms: Vec<f64> = (0..5).flat_map(|_| sorted.clone()).collect();
        let grid = GridDistribution::uniform(atoms, 5, 5).unwrap();
        let d = missing(&y, &[true; 5]);
        for q in [0.1, 0.2, 0.5, 0.7, 0.95] {
            assert_eq!(estimate_od(&d, &grid, q).unwrap(), sample_quantile(&y, q));
        }
    }

    #[test]
    fn od_two_atom_lower_quartile() {
        let grid = GridDistribution::uniform(vec![0.0, 1.0], 1, 2).unwrap();
        let d = missing(&[0.0], &[true]);
        assert_eq!(estimate_od(&d, &grid, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn ipw_hand_solved() {
        let d = missing(&[1.0, 2.0, 3.0, 4.0], &[true; 4]);
        let e = Propensity::new(vec![0.5, 1.0, 1.0, 1.0]).unwrap();
        // candidates 1..4 give (1/4) * (2, 3, 4, 5) - 1/2 = (0, .25, .5, .75)
        let r = estimate_ipw(&d, &e, 0.5).unwrap();
        assert_eq!(r.theta, 1.0);
        assert_eq!(r.warning, None);
    }

    #[test]
    fn ipw_insufficient_weight() {
        // one of two units observed with e = 1: weights sum to n/2 < 0.9 n
        let d = missing(&[5.0, 0.0], &[true, false]);
        let r = estimate_ipw(&d, &ones(2), 0.9).unwrap();
        assert_eq!(r.theta, 5.0);
        assert_eq!(r.warning, Some(Warning::InsufficientWeight));
    }

    #[test]
    fn firpo_matches_check_loss_enumeration() {
        let y = [1.0, 2.0, 2.5, 7.0, -3.0];
        let e = [0.25, 0.5, 0.8, 0.1, 0.6];
        let d = missing(&y, &[true; 5]);
        let prop = Propensity::new(e.to_vec()).unwrap();
        for q in [0.1, 0.3, 0.5, 0.77, 0.9] {
            let check = |t: f64| -> f64 {
                y.iter()
                    .zip(&e)
                    .map(|(&v, &p)| {
                        let u = v - t;
                        (1.0 / p) * u * (q - if u < 0.0 { 1.0 } else { 0.0 })
                    })
                    .sum()
            };
            let best = y
                .iter()
                .copied()
                .min_by(|a, b| check(*a).partial_cmp(&check(*b)).unwrap().then(a.total_cmp(b)))
                .unwrap();
            assert_eq!(estimate_firpo(&d, &prop, q).unwrap(), best, "q={q}");
        }
        let d = missing(&[1.0, 2.0], &[true; 2]);
        let prop = Propensity::new(vec![1.0 / 3.0, 1.0]).unwrap();
        assert_eq!(estimate_firpo(&d, &prop, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn aipw_matches_brute_force_on_toy() {
        let y = [0.3, 1.7, 0.0];
        let m = [true, true, false];
        let d = missing(&y, &m);
        let atoms = vec![0.0, 1.0, 2.0, -1.0, 0.5, 3.0, 0.2, 0.4, 2.5];
        let weights = vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4];
        let grid = GridDistribution::with_weights(atoms.clone(), weights, 3, 3).unwrap();
        let e = Propensity::new(vec![0.4, 0.9, 0.5]).unwrap();
        let nuis = NuisancePair::new(e.clone(), grid.clone()).unwrap();
        let phi = |t: f64| -> f64 {
            (0..3)
                .map(|i| {
                    let g = grid.row_cdf(i, t);
                    let h = if m[i] { 1.0 / e.values()[i] } else { 0.0 };
                    let ind = if m[i] && y[i] <= t { 1.0 } else { 0.0 };
                    h * (ind - g) + g
                })
                .sum::<f64>()
                / 3.0
        };
        let mut candidates: Vec<f64> = atoms.clone();
        candidates.extend([0.3, 1.7]);
        candidates.sort_by(f64::total_cmp);
        for q in [0.1, 0.25, 0.5, 0.6, 0.9] {
            let expected = candidates.iter().copied().find(|&t| phi(t) - q >= -1e-12).unwrap();
            let got = estimate_aipw(&d, &nuis, q).unwrap();
            assert_eq!(got.theta, expected, "q={q}");
        }
    }

    #[test]
    fn aipw_collapses_with_degenerate_grid() {
        let y = [2.0, -1.0, 0.5, 4.0];
        let d = missing(&y, &[true; 4]);
        let atoms: Vec<f64> = y.iter().flat_map(|&v| [v, v]).collect();
        let grid = GridDistribution::uniform(atoms, 4, 2).unwrap();
        let nuis = NuisancePair::new(ones(4), grid).unwrap();
        for q in [0.2, 0.5, 0.8] {
            assert_eq!(estimate_aipw(&d, &nuis, q).unwrap().theta, sample_quantile(&y, q));
        }
    }

    #[test]
    fn tmle_fixed_point_leaves_weights() {
        let d = missing(&[0.0, 1.0], &[true, true]);
        let grid = GridDistribution::uniform(vec![0.0, 1.0, 0.0, 1.0], 2, 2).unwrap();
        let nuis = NuisancePair::new(ones(2), grid.clone()).unwrap();
        let fit = tmle_missing(&d, &nuis, 0.5).unwrap();
        assert_eq!(fit.diagnostics.epsilons, vec![0.0]);
        assert_eq!(fit.grid.weights(), grid.weights());
        assert_eq!(fit.theta, estimate_od(&d, &grid, 0.5).unwrap());
        assert!(fit.diagnostics.converged);
    }

    #[test]
    fn outcome_outside_its_row_is_left_out_of_the_fit() {
        // theta = 1; unit 0 has Y = 0 <= theta but no atom there, so it would
        // add eps * c to the objective without bound
        let d = missing(&[0.0, 0.5], &[true, true]);
        let grid = GridDistribution::uniform(vec![10.0, 11.0, 0.0, 1.0], 2, 2).unwrap();
        let nuis = NuisancePair::new(ones(2), grid).unwrap();
        let fit = tmle_missing(&d, &nuis, 0.5).unwrap();
        assert_eq!(fit.theta, 1.0);
        assert_eq!(fit.diagnostics.epsilons, vec![0.0]);
        // the left-out unit still counts in the residual: (1/2)(1 - 0) + (0 + 1)/2 - 1/2
        assert!((fit.diagnostics.score_residual - 0.5).abs() < 1e-15);
    }

    #[test]
    fn att_single_step_closed_form() {
        // unit 0 treated; units 1, 2 are controls with outcomes on either side of theta
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let d = Dataset::new(x, vec![true, false, false], vec![5.0, 0.0, 1.0], EstimandKind::EffectOnTreated)
            .unwrap();
        let grid = GridDistribution::with_weights(
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            vec![0.25, 0.75, 0.25, 0.75, 0.25, 0.75],
            3,
            2,
        )
        .unwrap();
        let e = Propensity::two_sided(vec![0.6; 3]).unwrap();
        let nuis = NuisancePair::new(e, grid).unwrap();
        let fit = tmle_att(&d, &nuis, 0.2).unwrap();
        // Two controls with indicators 1 and 0 and a common G = 1/4: the score
        // vanishes when the tilted mass below theta is 1/2, i.e. at
        // eps = ln(3) / c with c = 0.6 / 0.4.
        let c = 0.6 / 0.4;
        assert!((fit.diagnostics.epsilons[0] - 3f64.ln() / c).abs() < 1e-12);
        assert_eq!(fit.diagnostics.epsilons.len(), 2);
        assert_eq!(fit.diagnostics.epsilons[1], 0.0);
        assert_eq!(fit.theta, 0.0);
        for w in fit.grid.weights() {
            assert!((w - 0.5).abs() < 1e-12);
        }
        assert!(fit.diagnostics.converged);
    }

    #[test]
    fn att_requires_treated_units() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let d = Dataset::new(x, vec![false, false], vec![0.0, 1.0], EstimandKind::EffectOnTreated).unwrap();
        let grid = GridDistribution::uniform(vec![0.0, 1.0, 0.0, 1.0], 2, 2).unwrap();
        let nuis = NuisancePair::new(Propensity::two_sided(vec![0.5; 2]).unwrap(), grid).unwrap();
        assert!(tmle_att(&d, &nuis, 0.5).is_err());
    }

    #[test]
    fn identical_arms_give_zero_effect() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let d = Dataset::new(x, vec![true, false, true, false], vec![1.0, 1.0, 2.0, 2.0], EstimandKind::EffectOnTreated)
            .unwrap();
        let atoms: Vec<f64> = (0..4).flat_map(|_| [0.5, 1.0, 1.5, 2.0]).collect();
        let grid = GridDistribution::uniform(atoms, 4, 4).unwrap();
        let arm = NuisancePair::new(Propensity::new(vec![0.5; 4]).unwrap(), grid).unwrap();
        let fit = effect_on_quantile(&d, &arm, &arm, 0.5).unwrap();
        assert_eq!(fit.effect, 0.0);
    }

    #[test]
    fn objective_is_concave_around_optimum() {
        let rows: Vec<RowTerm> = (0..7)
            .map(|i| {
                let g = 0.1 + 0.1 * i as f64;
                let c = 1.0 + i as f64;
                let ind = if i % 2 == 0 { 1.0 } else { 0.0 };
                RowTerm { lik: 1.0, clever: c, below: g, observed_score: c * (ind - g) }
            })
            .collect();
        let obj = FluctuationObjective { rows: &rows, n: 7.0 };
        let eps = obj.maximize().unwrap();
        assert!(obj.gradient(eps).abs() < 1e-12);
        let h = 1e-3;
        for j in -10..=10 {
            let t = eps + j as f64 * h;
            let second = obj.value(t + h) - 2.0 * obj.value(t) + obj.value(t - h);
            assert!(second <= 1e-12);
        }
        // analytic gradient against a central difference
        let fd = (obj.value(eps + 1e-5) - obj.value(eps - 1e-5)) / 2e-5;
        assert!(fd.abs() < 1e-8);
        let fd0 = (obj.value(1e-5) - obj.value(-1e-5)) / 2e-5;
        assert!((fd0 - obj.gradient(0.0)).abs() < 1e-8);
    }

    #[test]
    fn unbounded_likelihood_reported() {
        // observed outcome below theta while the row puts no mass there
        let rows = vec![RowTerm { lik: 1.0, clever: 1.0, below: 0.0, observed_score: 1.0 }];
        let obj = FluctuationObjective { rows: &rows, n: 1.0 };
        assert!(obj.maximize().is_err());
    }

    #[test]
    fn supremum_at_infinity_takes_the_limit() {
        // one observed outcome below theta: log-likelihood rises to ln 2
        let rows = vec![RowTerm { lik: 1.0, clever: 1.0, below: 0.5, observed_score: 0.5 }];
        let obj = FluctuationObjective { rows: &rows, n: 1.0 };
        let eps = obj.maximize().unwrap();
        assert!(eps > 30.0);
        assert_eq!(obj.gradient(eps), 0.0);
        assert!((obj.value(eps) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
