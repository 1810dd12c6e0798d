//! Conditional density super learner.
//!
//! Candidates are histograms whose bin probabilities come from a discrete
//! hazard model fit on a repeated-measures expansion of the data. Bin
//! boundaries are placed by cutting the ECDF with parallel lines of slope
//! `-1/c`: `c = 0` gives equal-width bins and large `c` approaches
//! equal-count bins. Candidates are stacked by minimizing the cross-validated
//! negative log-likelihood of their convex mixture.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::distribution::GridDistribution;
use crate::error::{Error, Result};
use crate::nuisance::expit;

/// Density floor applied before taking logs in cross-validated risks.
pub const DENSITY_LOG_FLOOR: f64 = 1e-12;

/// Ridge penalty of the hazard regressions. Keeps bin effects finite when a
/// bin has no events (or only events) in a training fold.
pub const HAZARD_RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinScheme {
    /// Padded boundaries `b_0 < ... < b_k`.
    pub boundaries: Vec<f64>,
    /// Boundaries before padding, spanning exactly `[min y, max y]`.
    pub cuts: Vec<f64>,
    pub c: f64,
}

impl BinScheme {
    pub fn k(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn width(&self, t: usize) -> f64 {
        self.boundaries[t + 1] - self.boundaries[t]
    }

    /// 0-based bin containing `y`; the last bin is closed on the right.
    pub fn bin_of(&self, y: f64) -> Option<usize> {
        let b = &self.boundaries;
        let k = b.len() - 1;
        if !(y >= b[0] && y <= b[k]) {
            return None;
        }
        let t = b.partition_point(|&v| v <= y);
        Some((t.max(1) - 1).min(k - 1))
    }
}

/// Bin boundaries where the lines `u(x) = (x - min) + c * R * F(x) = b * R (1 + c) / k`,
/// `b = 0..k`, first reach the ECDF graph, with `R` the data range and `F`
/// the ECDF. End boundaries are then padded by half the median gap between
/// consecutive distinct values.
pub fn denby_mallows_boundaries(y: &[f64], c: f64, k: usize) -> Result<BinScheme> {
    if k == 0 {
        return Err(Error::invalid("number of bins must be at least 1"));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!("slope parameter {c} must be finite and nonnegative")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("outcomes must be finite"));
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // distinct values with ECDF heights
    let mut values: Vec<f64> = Vec::new();
    let mut heights: Vec<f64> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if values.last() == Some(&v) {
            *heights.last_mut().unwrap() = (i + 1) as f64 / n;
        } else {
            values.push(v);
            heights.push((i + 1) as f64 / n);
        }
    }
    if values.len() < k.max(2) {
        return Err(Error::invalid(format!(
            "{} distinct outcome values cannot define {k} bins",
            values.len()
        )));
    }
    let lo = values[0];
    let hi = *values.last().unwrap();
    let range = hi - lo;
    let scale = c * range;
    let u = |j: usize| values[j] - lo + scale * heights[j];
    let total = range * (1.0 + c);

    let mut cuts = Vec::with_capacity(k + 1);
    cuts.push(lo);
    let mut j = 0;
    for b in 1..k {
        let level = b as f64 * total / k as f64;
        while j < values.len() && u(j) < level {
            j += 1;
        }
        let x = if j == 0 {
            values[0]
        } else if j == values.len() {
            hi
        } else {
            // the horizontal run before values[j] sits at height F(values[j-1])
            (lo + level - scale * heights[j - 1]).min(values[j])
        };
        cuts.push(x.clamp(lo, hi));
    }
    cuts.push(hi);
    cuts.dedup();

    let mut gaps: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len();
    let median_gap = if m % 2 == 1 { gaps[m / 2] } else { 0.5 * (gaps[m / 2 - 1] + gaps[m / 2]) };
    let mut boundaries = cuts.clone();
    boundaries[0] -= 0.5 * median_gap;
    *boundaries.last_mut().unwrap() += 0.5 * median_gap;
    Ok(BinScheme { boundaries, cuts, c })
}

/// Person-period table: one row per (unit, bin at risk).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedTable {
    pub unit: Vec<usize>,
    /// 0-based bin index of the row.
    pub bin: Vec<usize>,
    pub label: Vec<bool>,
}

impl ExpandedTable {
    pub fn len(&self) -> usize {
        self.unit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.is_empty()
    }
}

/// Unit `i` with outcome in bin `t` contributes rows for bins `0..=t`
/// labelled `1{j == t}`.
pub fn expand_outcomes(y: &[f64], scheme: &BinScheme) -> Result<ExpandedTable> {
    let mut table = ExpandedTable { unit: Vec::new(), bin: Vec::new(), label: Vec::new() };
    for (i, &v) in y.iter().enumerate() {
        let t = scheme
            .bin_of(v)
            .ok_or_else(|| Error::invalid(format!("outcome {v} of unit {i} lies outside the bins")))?;
        for j in 0..=t {
            table.unit.push(i);
            table.bin.push(j);
            table.label.push(j == t);
        }
    }
    Ok(table)
}

/// Expansion of the observed units of a dataset; `unit` indexes into the
/// observed subset.
pub fn expand_repeated_measures(data: &Dataset, scheme: &BinScheme) -> Result<ExpandedTable> {
    let (_, y) = data.indicated_rows();
    expand_outcomes(&y, scheme)
}

/// A fitted conditional density of `y` given a covariate row.
pub trait ConditionalDensity: Send + Sync {
    fn density(&self, x: &[f64], y: f64) -> f64;
    fn cdf(&self, x: &[f64], y: f64) -> f64;
    /// Knots of a piecewise-linear CDF, if the CDF has that form.
    fn cdf_knots(&self, _x: &[f64]) -> Option<Vec<(f64, f64)>> {
        None
    }
}

pub trait DensityLearner: Send + Sync {
    fn name(&self) -> String;
    fn fit(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Box<dyn ConditionalDensity>>;
}

/// Histogram candidate with Denby-Mallows bins and logistic hazards on
/// standardized covariates plus one indicator per bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardBinLearner {
    pub c: f64,
    pub k: usize,
}

/// Default library: `c in {0, 1, 1e6}` crossed with `k in {5, 10, 20}`.
pub fn default_library() -> Vec<HazardBinLearner> {
    let mut lib = Vec::new();
    for c in [0.0, 1.0, 1e6] {
        for k in [5, 10, 20] {
            lib.push(HazardBinLearner { c, k });
        }
    }
    lib
}

#[derive(Debug, Clone)]
pub struct HazardDensity {
    pub scheme: BinScheme,
    /// Intercept per hazard bin, `k - 1` entries; the last hazard is 1.
    bin_effects: Vec<f64>,
    slopes: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl HazardDensity {
    fn linear(&self, x: &[f64]) -> f64 {
        self.slopes
            .iter()
            .zip(x)
            .zip(self.means.iter().zip(&self.scales))
            .map(|((b, v), (m, s))| b * (v - m) / s)
            .sum()
    }

    /// Discrete hazards `P(bin j | at risk at j, x)`, `k` entries with the
    /// last fixed at 1.
    pub fn hazards(&self, x: &[f64]) -> Vec<f64> {
        let eta = self.linear(x);
        let mut h: Vec<f64> = self.bin_effects.iter().map(|a| expit(a + eta)).collect();
        h.push(1.0);
        h
    }

    pub fn bin_probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut survive = 1.0;
        self.hazards(x)
            .into_iter()
            .map(|h| {
                let p = survive * h;
                survive *= 1.0 - h;
                p
            })
            .collect()
    }
}

impl ConditionalDensity for HazardDensity {
    fn density(&self, x: &[f64], y: f64) -> f64 {
        match self.scheme.bin_of(y) {
            Some(t) => self.bin_probabilities(x)[t] / self.scheme.width(t),
            None => 0.0,
        }
    }

    fn cdf(&self, x: &[f64], y: f64) -> f64 {
        let b = &self.scheme.boundaries;
        if y <= b[0] {
            return 0.0;
        }
        if y >= b[b.len() - 1] {
            return 1.0;
        }
        let t = self.scheme.bin_of(y).expect("inside the bins");
        let p = self.bin_probabilities(x);
        let below: f64 = p[..t].iter().sum();
        below + p[t] * (y - b[t]) / self.scheme.width(t)
    }

    fn cdf_knots(&self, x: &[f64]) -> Option<Vec<(f64, f64)>> {
        let p = self.bin_probabilities(x);
        let b = &self.scheme.boundaries;
        let mut cum = 0.0;
        let mut knots = vec![(b[0], 0.0)];
        for (t, pt) in p.iter().enumerate() {
            cum += pt;
            knots.push((b[t + 1], cum));
        }
        let last = knots.len() - 1;
        knots[last].1 = 1.0;
        Some(knots)
    }
}

/// Ridge-penalized logistic regression of the hazard labels by Newton's
/// method. Parameters are the `k - 1` bin effects followed by the slopes.
fn fit_hazards(z: &DMatrix<f64>, table: &ExpandedTable, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = z.ncols();
    let d = k - 1 + p;
    // rows of the last bin carry a hazard of 1 and no information
    let rows: Vec<usize> = (0..table.len()).filter(|&r| table.bin[r] < k - 1).collect();
    let mut beta = DVector::<f64>::zeros(d);
    if d == 0 || rows.is_empty() {
        return Ok((vec![0.0; k - 1], vec![0.0; p]));
    }
    let objective = |beta: &DVector<f64>| -> f64 {
        let mut ll = 0.0;
        for &r in &rows {
            let i = table.unit[r];
            let mut eta = beta[table.bin[r]];
            for j in 0..p {
                eta += beta[k - 1 + j] * z[(i, j)];
            }
            let y = if table.label[r] { 1.0 } else { 0.0 };
            // log-likelihood y * eta - log(1 + e^eta)
            ll += y * eta - if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        }
        ll - 0.5 * HAZARD_RIDGE * beta.norm_squared()
    };
    let mut current = objective(&beta);
    for _ in 0..100 {
        let mut grad = DVector::<f64>::zeros(d);
        let mut info = DMatrix::<f64>::zeros(d, d);
        let mut feat = vec![0.0; d];
        let mut idx = Vec::with_capacity(p + 1);
        for &r in &rows {
            let i = table.unit[r];
            idx.clear();
            idx.push(table.bin[r]);
            feat[table.bin[r]] = 1.0;
            let mut eta = beta[table.bin[r]];
            for j in 0..p {
                feat[k - 1 + j] = z[(i, j)];
                idx.push(k - 1 + j);
                eta += beta[k - 1 + j] * z[(i, j)];
            }
            let mu = expit(eta);
            let y = if table.label[r] { 1.0 } else { 0.0 };
            let w = mu * (1.0 - mu);
            for &a in &idx {
                grad[a] += (y - mu) * feat[a];
                for &b in &idx {
                    info[(a, b)] += w * feat[a] * feat[b];
                }
            }
            feat[table.bin[r]] = 0.0;
        }
        grad -= &beta * HAZARD_RIDGE;
        for a in 0..d {
            info[(a, a)] += HAZARD_RIDGE;
        }
        if grad.amax() <= 1e-9 * rows.len() as f64 {
            break;
        }
        let step = info.cholesky().ok_or(Error::Singular)?.solve(&grad);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let val = objective(&cand);
            if val >= current {
                moved = val > current;
                beta = cand;
                current = val;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok((beta.rows(0, k - 1).iter().copied().collect(), beta.rows(k - 1, p).iter().copied().collect()))
}

impl HazardBinLearner {
    pub fn fit_hazard(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<HazardDensity> {
        if x.nrows() != y.len() {
            return Err(Error::invalid("covariate rows and outcomes differ in length"));
        }
        let scheme = denby_mallows_boundaries(y, self.c, self.k)?;
        let k = scheme.k();
        let (n, p) = x.shape();
        let mut means = Vec::with_capacity(p);
        let mut scales = Vec::with_capacity(p);
        for j in 0..p {
            let col = x.column(j);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
            means.push(m);
            scales.push(if sd > 0.0 { sd } else { 1.0 });
        }
        let z = DMatrix::from_fn(n, p, |i, j| (x[(i, j)] - means[j]) / scales[j]);
        let table = expand_outcomes(y, &scheme)?;
        let (bin_effects, slopes) = fit_hazards(&z, &table, k)?;
        Ok(HazardDensity { scheme, bin_effects, slopes, means, scales })
    }
}

impl DensityLearner for HazardBinLearner {
    fn name(&self) -> String {
        format!("hazard_c{}_k{}", self.c, self.k)
    }

    fn fit(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Box<dyn ConditionalDensity>> {
        Ok(Box::new(self.fit_hazard(x, y)?))
    }
}

/// Deterministic partition of `0..n` into `j` folds of near-equal size.
pub fn make_folds(n: usize, j: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if j < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); j];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % j].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    if let Some(empty) = folds.iter().position(|f| f.is_empty()) {
        return Err(Error::EmptyFold(empty));
    }
    Ok(folds)
}

fn check_folds(folds: &[Vec<usize>], n: usize) -> Result<()> {
    if folds.len() < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    let mut seen = vec![false; n];
    for (f, fold) in folds.iter().enumerate() {
        if fold.is_empty() {
            return Err(Error::EmptyFold(f));
        }
        for &i in fold {
            if i >= n || seen[i] {
                return Err(Error::invalid("folds must partition the units"));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("folds must cover every unit"));
    }
    Ok(())
}

/// Held-out densities of one learner: entry `i` is the density of unit `i`
/// under the fit that excluded its fold.
fn held_out_densities(
    learner: &dyn DensityLearner,
    x: &DMatrix<f64>,
    y: &[f64],
    folds: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let n = y.len();
    let fits: Vec<Result<Vec<(usize, f64)>>> = folds
        .par_iter()
        .map(|valid| {
            let mut in_valid = vec![false; n];
            valid.iter().for_each(|&i| in_valid[i] = true);
            let train: Vec<usize> = (0..n).filter(|&i| !in_valid[i]).collect();
            let xt = x.select_rows(train.iter());
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let fit = learner.fit(&xt, &yt)?;
            Ok(valid
                .iter()
                .map(|&i| {
                    let row: Vec<f64> = x.row(i).iter().copied().collect();
                    (i, fit.density(&row, y[i]))
                })
                .collect())
        })
        .collect();
    let mut out = vec![0.0; n];
    for fold in fits {
        for (i, d) in fold? {
            out[i] = d;
        }
    }
    Ok(out)
}

/// `1 / (J |V_j|)` for each unit, so the cross-validated risk is a weighted
/// sum over units.
fn unit_risk_weights(folds: &[Vec<usize>], n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    let j = folds.len() as f64;
    for fold in folds {
        for &i in fold {
            w[i] = 1.0 / (j * fold.len() as f64);
        }
    }
    w
}

fn risk_from_densities(dens: &[f64], weights: &[f64]) -> f64 {
    -dens
        .iter()
        .zip(weights)
        .map(|(&d, &w)| w * d.max(DENSITY_LOG_FLOOR).ln())
        .sum::<f64>()
}

/// Cross-validated negative log-likelihood of a learner.
pub fn cv_risk(learner: &dyn DensityLearner, x: &DMatrix<f64>, y: &[f64], folds: &[Vec<usize>]) -> Result<f64> {
    check_folds(folds, y.len())?;
    let dens = held_out_densities(learner, x, y, folds)?;
    Ok(risk_from_densities(&dens, &unit_risk_weights(folds, y.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackStatus {
    Converged,
    IterationCap,
}

/// Simplex weights minimizing the risk of the mixture of held-out densities.
#[derive(Debug, Clone, PartialEq)]
pub struct StackWeights {
    pub alpha: Vec<f64>,
    pub risk: f64,
    pub candidate_risks: Vec<f64>,
    pub status: StackStatus,
    pub iterations: usize,
}

const STACK_MAX_ITER: usize = 500;
const STACK_TOL: f64 = 1e-10;

/// Exponentiated-gradient descent over the simplex with backtracking,
/// started at uniform weights. The result is compared against each vertex
/// and the best is kept.
///
/// `held_out[c][i]` is the held-out density of unit `i` under candidate `c`.
pub fn optimize_simplex(held_out: &[Vec<f64>], unit_weights: &[f64]) -> Result<StackWeights> {
    let m = held_out.len();
    if m == 0 {
        return Err(Error::invalid("empty candidate library"));
    }
    let n = unit_weights.len();
    let risk = |alpha: &[f64]| -> f64 {
        -(0..n)
            .map(|i| {
                let mix: f64 = (0..m).map(|c| alpha[c] * held_out[c][i]).sum();
                unit_weights[i] * mix.max(DENSITY_LOG_FLOOR).ln()
            })
            .sum::<f64>()
    };
    let candidate_risks: Vec<f64> = held_out.iter().map(|d| risk_from_densities(d, unit_weights)).collect();
    let mut alpha = vec![1.0 / m as f64; m];
    let mut current = risk(&alpha);
    let mut status = StackStatus::IterationCap;
    let mut iterations = 0;
    let mut eta = 1.0;
    for it in 1..=STACK_MAX_ITER {
        iterations = it;
        let mut grad = vec![0.0; m];
        for i in 0..n {
            let mix: f64 = (0..m).map(|c| alpha[c] * held_out[c][i]).sum();
            if mix > DENSITY_LOG_FLOOR {
                for c in 0..m {
                    grad[c] -= unit_weights[i] * held_out[c][i] / mix;
                }
            }
        }
        let gmin = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let mut improved = None;
        let mut step = eta;
        for _ in 0..60 {
            let mut cand: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a * (-step * (g - gmin)).exp()).collect();
            let s: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|v| *v /= s);
            let r = risk(&cand);
            if r < current {
                improved = Some((cand, r));
                break;
            }
            step *= 0.5;
        }
        match improved {
            Some((cand, r)) => {
                let gain = current - r;
                alpha = cand;
                current = r;
                eta = (step * 2.0).min(1e6);
                if gain < STACK_TOL {
                    status = StackStatus::Converged;
                    break;
                }
            }
            None => {
                status = StackStatus::Converged;
                break;
            }
        }
    }
    if let Some((best, &r)) = candidate_risks
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
    {
        if r < current {
            alpha = vec![0.0; m];
            alpha[best] = 1.0;
            current = r;
        }
    }
    Ok(StackWeights { alpha, risk: current, candidate_risks, status, iterations })
}

/// Convex mixture of fitted candidates.
pub struct StackedDensity {
    pub names: Vec<String>,
    pub candidates: Vec<Box<dyn ConditionalDensity>>,
    pub weights: StackWeights,
}

impl std::fmt::Debug for StackedDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StackedDensity")
            .field("names", &self.names)
            .field("weights", &self.weights)
            .finish()
    }
}

impl StackedDensity {
    pub fn alpha(&self) -> &[f64] {
        &self.weights.alpha
    }

    /// CDF knots of the mixture, when every candidate with positive weight
    /// has a piecewise-linear CDF.
    pub fn mixture_knots(&self, x: &[f64]) -> Option<Vec<(f64, f64)>> {
        let mut per: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
        for (a, cand) in self.weights.alpha.iter().zip(&self.candidates) {
            if *a > 0.0 {
                per.push((*a, cand.cdf_knots(x)?));
            }
        }
        let mut xs: Vec<f64> = per.iter().flat_map(|(_, k)| k.iter().map(|p| p.0)).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        Some(
            xs.into_iter()
                .map(|v| {
                    let f: f64 = per.iter().map(|(a, k)| a * interpolate(k, v)).sum();
                    (v, f)
                })
                .collect(),
        )
    }
}

fn interpolate(knots: &[(f64, f64)], v: f64) -> f64 {
    if v <= knots[0].0 {
        return 0.0;
    }
    if v >= knots[knots.len() - 1].0 {
        return 1.0;
    }
    let j = knots.partition_point(|p| p.0 <= v);
    let (x0, f0) = knots[j - 1];
    let (x1, f1) = knots[j];
    f0 + (f1 - f0) * (v - x0) / (x1 - x0)
}

impl ConditionalDensity for StackedDensity {
    fn density(&self, x: &[f64], y: f64) -> f64 {
        self.weights
            .alpha
            .iter()
            .zip(&self.candidates)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, c)| a * c.density(x, y))
            .sum()
    }

    fn cdf(&self, x: &[f64], y: f64) -> f64 {
        self.weights
            .alpha
            .iter()
            .zip(&self.candidates)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, c)| a * c.cdf(x, y))
            .sum()
    }

    fn cdf_knots(&self, x: &[f64]) -> Option<Vec<(f64, f64)>> {
        self.mixture_knots(x)
    }
}

/// Cross-validates every learner on the same folds, stacks, and refits each
/// learner on the full data.
pub fn stack_weights(
    learners: &[Box<dyn DensityLearner>],
    x: &DMatrix<f64>,
    y: &[f64],
    folds: &[Vec<usize>],
) -> Result<StackedDensity> {
    if learners.is_empty() {
        return Err(Error::invalid("empty candidate library"));
    }
    check_folds(folds, y.len())?;
    let held_out: Vec<Vec<f64>> = learners
        .par_iter()
        .map(|l| held_out_densities(l.as_ref(), x, y, folds))
        .collect::<Result<_>>()?;
    let weights = optimize_simplex(&held_out, &unit_risk_weights(folds, y.len()))?;
    let candidates = learners.par_iter().map(|l| l.fit(x, y)).collect::<Result<Vec<_>>>()?;
    Ok(StackedDensity { names: learners.iter().map(|l| l.name()).collect(), candidates, weights })
}

/// Super learner over the default hazard-histogram library, trained on the
/// observed units of `data`.
pub fn fit_density_super_learner(data: &Dataset, folds: usize, seed: u64) -> Result<StackedDensity> {
    let (x, y) = data.indicated_rows();
    let mut distinct = y.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let learners: Vec<Box<dyn DensityLearner>> = default_library()
        .into_iter()
        // training splits must keep at least k distinct values
        .filter(|l| distinct.len() * (folds.max(2) - 1) / folds.max(2) >= 2 * l.k)
        .map(|l| Box::new(l) as Box<dyn DensityLearner>)
        .collect();
    if learners.is_empty() {
        return Err(Error::invalid("too few distinct outcomes for any library candidate"));
    }
    let fold_idx = make_folds(y.len(), folds, seed)?;
    stack_weights(&learners, &x, &y, &fold_idx)
}

/// Quantiles of a conditional distribution at levels `1/k, ..., (k-1)/k`
/// for every covariate row.
pub fn to_grid(stacked: &dyn ConditionalDensity, x: &DMatrix<f64>, k: usize) -> Result<GridDistribution> {
    if k < 2 {
        return Err(Error::TooFewColumns(k));
    }
    let n = x.nrows();
    let width = k - 1;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let levels = (1..k).map(|j| j as f64 / k as f64);
            match stacked.cdf_knots(&row) {
                Some(knots) => levels.map(|p| invert_knots(&knots, p)).collect(),
                None => levels.map(|p| invert_by_bisection(stacked, &row, p)).collect(),
            }
        })
        .collect();
    let mut atoms = Vec::with_capacity(n * width);
    for mut r in rows {
        // guard against rounding reversals between adjacent levels
        for j in 1..r.len() {
            if r[j] < r[j - 1] {
                r[j] = r[j - 1];
            }
        }
        atoms.extend(r);
    }
    GridDistribution::uniform(atoms, n, width)
}

/// `inf{y : F(y) >= p}` for a piecewise-linear CDF through the knots.
fn invert_knots(knots: &[(f64, f64)], p: f64) -> f64 {
    let j = knots.partition_point(|k| k.1 < p);
    if j == 0 {
        return knots[0].0;
    }
    if j >= knots.len() {
        return knots[knots.len() - 1].0;
    }
    let (x0, f0) = knots[j - 1];
    let (x1, f1) = knots[j];
    (x0 + (x1 - x0) * (p - f0) / (f1 - f0)).clamp(x0, x1)
}

fn invert_by_bisection(dist: &dyn ConditionalDensity, x: &[f64], p: f64) -> f64 {
    let mut lo = -1.0;
    let mut hi = 1.0;
    while dist.cdf(x, lo) >= p && lo > -1e300 {
        lo *= 2.0;
    }
    while dist.cdf(x, hi) < p && hi < 1e300 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if dist.cdf(x, mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn equal_width_when_c_is_zero() {
        let y: Vec<f64> = (0..101).map(|i| (i as f64 / 100.0).powi(2)).collect();
        let s = denby_mallows_boundaries(&y, 0.0, 4).unwrap();
        for (b, cut) in s.cuts.iter().enumerate() {
            assert!((cut - b as f64 / 4.0).abs() < 1e-12);
        }
        assert!(s.boundaries[0] < 0.0 && s.boundaries[4] > 1.0);
    }

    #[test]
    fn hand_geometry_on_four_points() {
        // u(v) = v + 3 F(v) = (0.75, 2.5, 4.25, 6); the middle line u = 3
        // meets the horizontal run at height 1/2 at x = 3 - 1.5
        let s = denby_mallows_boundaries(&[0.0, 1.0, 2.0, 3.0], 1.0, 2).unwrap();
        assert_eq!(s.cuts, vec![0.0, 1.5, 3.0]);
        assert_eq!(s.boundaries, vec![-0.5, 1.5, 3.5]);
    }

    #[test]
    fn boundaries_match_dense_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 10.0).collect();
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
        for c in [0.0, 0.5, 3.0] {
            let k = 6;
            let s = denby_mallows_boundaries(&y, c, k).unwrap();
            let u = |x: f64| {
                let f = y.iter().filter(|&&v| v <= x).count() as f64 / y.len() as f64;
                x - lo + c * (hi - lo) * f
            };
            for b in 1..k {
                let level = b as f64 * (hi - lo) * (1.0 + c) / k as f64;
                let steps = 200_000;
                let scan = (0..=steps)
                    .map(|s| lo + (hi - lo) * s as f64 / steps as f64)
                    .find(|&x| u(x) >= level)
                    .unwrap();
                assert!((s.cuts[b] - scan).abs() <= (hi - lo) / steps as f64 * 1.01, "c={c} b={b}");
            }
        }
    }

    #[test]
    fn large_c_approaches_quartiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut y: Vec<f64> = (0..400).map(|_| normal.sample(&mut rng)).collect();
        let s = denby_mallows_boundaries(&y, 1e6, 4).unwrap();
        y.sort_by(f64::total_cmp);
        for b in 1..4 {
            let idx = y.len() * b / 4 - 1;
            let lo = y[idx.saturating_sub(1)];
            let hi = y[idx + 1];
            assert!(s.cuts[b] >= lo && s.cuts[b] <= hi, "b={b}");
        }
    }

    #[test]
    fn rejects_too_few_distinct() {
        assert!(denby_mallows_boundaries(&[1.0, 1.0, 2.0], 0.0, 3).is_err());
        assert!(denby_mallows_boundaries(&[1.0, 2.0], 0.0, 0).is_err());
    }

    #[test]
    fn appending_a_maximum_keeps_first_boundary() {
        let y = vec![0.0, 0.4, 1.1, 1.5, 2.0, 3.2];
        let a = denby_mallows_boundaries(&y, 0.0, 3).unwrap();
        let mut y2 = y.clone();
        y2.push(5.0);
        let b = denby_mallows_boundaries(&y2, 0.0, 3).unwrap();
        assert_eq!(a.cuts[0], b.cuts[0]);
        assert!(b.cuts[3] > a.cuts[3]);
    }

    #[test]
    fn expansion_shapes() {
        let s = BinScheme { boundaries: vec![0.0, 1.0, 2.0, 3.0, 4.0], cuts: vec![], c: 0.0 };
        let t = expand_outcomes(&[0.5], &s).unwrap();
        assert_eq!(t.label, vec![true]);
        let t = expand_outcomes(&[2.5], &s).unwrap();
        assert_eq!(t.label, vec![false, false, true]);
        assert_eq!(t.bin, vec![0, 1, 2]);
        assert!(expand_outcomes(&[4.5], &s).is_err());
        assert_eq!(s.bin_of(4.0), Some(3));
        assert_eq!(s.bin_of(1.0), Some(1));
    }

    #[test]
    fn hazards_reassemble_empirical_bin_frequencies() {
        // without covariates the hazard MLE is the at-risk event fraction, so
        // bin probabilities equal the empirical bin frequencies
        let y = vec![0.1, 0.2, 1.3, 1.4, 1.5, 2.6, 3.1, 3.7, 3.8, 3.9];
        let x = DMatrix::<f64>::zeros(10, 0);
        let fit = HazardBinLearner { c: 0.0, k: 4 }.fit_hazard(&x, &y).unwrap();
        let probs = fit.bin_probabilities(&[]);
        let mut counts = vec![0.0; 4];
        for &v in &y {
            counts[fit.scheme.bin_of(v).unwrap()] += 0.1;
        }
        for (p, c) in probs.iter().zip(&counts) {
            assert!((p - c).abs() < 1e-4, "{probs:?} vs {counts:?}");
        }
        let h = fit.hazards(&[]);
        let mut survive = 1.0;
        for t in 0..4 {
            assert!((probs[t] - survive * h[t]).abs() < 1e-15);
            survive *= 1.0 - h[t];
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hazard_density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] * 3.0 + rng.random::<f64>()).collect();
        let fit = HazardBinLearner { c: 1.0, k: 10 }.fit_hazard(&x, &y).unwrap();
        for i in 0..n {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let p = fit.bin_probabilities(&row);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let steps = 20_000;
            let (a, b) = (fit.scheme.boundaries[0], fit.scheme.boundaries[fit.scheme.k()]);
            let integral: f64 = (0..steps)
                .map(|s| fit.density(&row, a + (b - a) * (s as f64 + 0.5) / steps as f64) * (b - a) / steps as f64)
                .sum();
            assert!((integral - 1.0).abs() < 1e-3);
        }
    }

    struct Fixed<F: Fn(f64) -> f64 + Send + Sync>(F);

    impl<F: Fn(f64) -> f64 + Send + Sync + Clone + 'static> ConditionalDensity for Fixed<F> {
        fn density(&self, _x: &[f64], y: f64) -> f64 {
            (self.0)(y)
        }
        fn cdf(&self, _x: &[f64], _y: f64) -> f64 {
            unimplemented!()
        }
    }

    impl<F: Fn(f64) -> f64 + Send + Sync + Clone + 'static> DensityLearner for Fixed<F> {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn fit(&self, _x: &DMatrix<f64>, _y: &[f64]) -> Result<Box<dyn ConditionalDensity>> {
            Ok(Box::new(Fixed(self.0.clone())))
        }
    }

    fn two_step(y: f64) -> f64 {
        if (0.0..1.0).contains(&y) {
            0.75
        } else if (1.0..2.0).contains(&y) {
            0.25
        } else {
            0.0
        }
    }

    #[test]
    fn true_density_risk_is_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let y: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.75 { rng.random::<f64>() } else { 1.0 + rng.random::<f64>() })
            .collect();
        let x = DMatrix::<f64>::zeros(n, 0);
        let folds = make_folds(n, 5, 1).unwrap();
        let risk = cv_risk(&Fixed(two_step), &x, &y, &folds).unwrap();
        let entropy = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        // per-unit log density has sd 0.55 / sqrt(n)
        assert!((risk - entropy).abs() < 4.0 * 0.55 / (n as f64).sqrt(), "{risk} vs {entropy}");
    }

    #[test]
    fn zero_density_is_floored() {
        let y = vec![0.5, 5.0, 0.2, 0.7];
        let x = DMatrix::<f64>::zeros(4, 0);
        let folds = make_folds(4, 2, 0).unwrap();
        let r = cv_risk(&Fixed(two_step), &x, &y, &folds).unwrap();
        assert!(r.is_finite());
        assert!(r > 0.25 * -(DENSITY_LOG_FLOOR.ln()) - 1.0);
    }

    #[test]
    fn folds_partition_and_are_deterministic() {
        let a = make_folds(23, 5, 42).unwrap();
        assert_eq!(a, make_folds(23, 5, 42).unwrap());
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(matches!(make_folds(3, 5, 0), Err(Error::EmptyFold(_))));
        assert!(check_folds(&[vec![0], vec![0, 1]], 2).is_err());
    }

    #[test]
    fn stack_single_and_identical_candidates() {
        let dens = vec![vec![0.2, 0.5, 0.9]];
        let w = vec![1.0 / 3.0; 3];
        assert_eq!(optimize_simplex(&dens, &w).unwrap().alpha, vec![1.0]);
        let twin = vec![vec![0.2, 0.5, 0.9], vec![0.2, 0.5, 0.9]];
        let s = optimize_simplex(&twin, &w).unwrap();
        assert_eq!(s.alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn stack_beats_every_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let m = 4;
            let n = 50;
            let dens: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random::<f64>() * 2.0).collect()).collect();
            let w = vec![1.0 / n as f64; n];
            let s = optimize_simplex(&dens, &w).unwrap();
            assert!((s.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for r in &s.candidate_risks {
                assert!(s.risk <= r + 1e-9);
            }
        }
    }

    #[test]
    fn stack_concentrates_on_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5000;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let x = DMatrix::<f64>::zeros(n, 0);
        let phi = |m: f64, s: f64| move |y: f64| (-0.5 * ((y - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let learners: Vec<Box<dyn DensityLearner>> = vec![
            Box::new(Fixed(phi(0.0, 1.0))),
            Box::new(Fixed(phi(4.0, 1.0))),
            Box::new(Fixed(phi(0.0, 8.0))),
        ];
        let folds = make_folds(n, 5, 0).unwrap();
        let s = stack_weights(&learners, &x, &y, &folds).unwrap();
        assert!(s.alpha()[0] >= 0.9, "{:?}", s.alpha());
    }

    #[test]
    fn grid_from_single_bin_is_linear() {
        let scheme = BinScheme { boundaries: vec![0.0, 2.0], cuts: vec![], c: 0.0 };
        let d = HazardDensity { scheme, bin_effects: vec![], slopes: vec![], means: vec![], scales: vec![] };
        let g = to_grid(&d, &DMatrix::<f64>::zeros(1, 0), 4).unwrap();
        assert_eq!(g.atoms(), &[0.5, 1.0, 1.5]);
    }

    #[test]
    fn grid_median_at_shared_boundary() {
        let scheme = BinScheme { boundaries: vec![0.0, 1.0, 2.0], cuts: vec![], c: 0.0 };
        let d = HazardDensity { scheme, bin_effects: vec![0.0], slopes: vec![], means: vec![], scales: vec![] };
        let g = to_grid(&d, &DMatrix::<f64>::zeros(1, 0), 2).unwrap();
        assert_eq!(g.atoms(), &[1.0]);
    }

    #[test]
    fn grid_round_trip_within_one_over_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 300;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let y: Vec<f64> = (0..n).map(|i| 2.0 * x[(i, 0)] + rng.random::<f64>()).collect();
        let learners: Vec<Box<dyn DensityLearner>> =
            vec![Box::new(HazardBinLearner { c: 0.0, k: 5 }), Box::new(HazardBinLearner { c: 1.0, k: 8 })];
        let s = stack_weights(&learners, &x, &y, &make_folds(n, 5, 3).unwrap()).unwrap();
        let k = 50;
        let g = to_grid(&s, &x, k).unwrap();
        for i in (0..n).step_by(37) {
            let row = [x[(i, 0)]];
            for step in 0..=100 {
                let v = -0.5 + 4.0 * step as f64 / 100.0;
                assert!((g.row_cdf(i, v) - s.cdf(&row, v)).abs() <= 1.0 / k as f64 + 1e-12);
            }
        }
    }
}
