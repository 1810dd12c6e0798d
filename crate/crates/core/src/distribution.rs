//! Point-mass conditional distributions on quantile grids and the step
//! function CDFs built from them.
//!
//! Every CDF in this crate is a right-continuous step function over a finite
//! set of atoms. Quantiles are `inf{y : F(y) >= q}` evaluated exactly over the
//! sorted, tie-merged atom locations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Tolerance on per-row weight sums.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// `cum >= q * total`, the single crossing rule shared by every estimator so
/// that reductions between them hold bit for bit.
#[inline]
pub(crate) fn reaches(cum: f64, q: f64, total: f64) -> bool {
    cum >= q * total
}

pub(crate) fn check_level(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::QuantileLevel(q))
    }
}

/// Per-unit conditional distributions stored as `n x k` atoms with simplex
/// weights. Row `i` puts mass `weights[i, j]` on `atoms[i, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDistribution {
    n: usize,
    k: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl GridDistribution {
    /// Row-major atoms with uniform weights `1/k`.
    pub fn uniform(atoms: Vec<f64>, n: usize, k: usize) -> Result<Self> {
        let weights = vec![1.0 / k as f64; n * k];
        Self::with_weights(atoms, weights, n, k)
    }

    pub fn with_weights(atoms: Vec<f64>, weights: Vec<f64>, n: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::TooFewColumns(k));
        }
        if n == 0 {
            return Err(Error::invalid("grid has no rows"));
        }
        if atoms.len() != n * k || weights.len() != n * k {
            return Err(Error::invalid(format!(
                "grid storage has {} atoms and {} weights, expected {}",
                atoms.len(),
                weights.len(),
                n * k
            )));
        }
        for i in 0..n {
            let row = &atoms[i * k..(i + 1) * k];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("grid row {i} has a non-finite atom")));
            }
            if row.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::UnsortedRow { row: i });
            }
            let w = &weights[i * k..(i + 1) * k];
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(format!("grid row {i} has a negative weight")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!("grid row {i} weights sum to {s}")));
            }
        }
        Ok(Self { n, k, atoms, weights })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_atoms(&self) -> usize {
        self.k
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row_atoms(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.k..(i + 1) * self.k]
    }

    pub fn row_weights(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    /// `G(y | x_i) = sum_j 1{Q[i,j] <= y} w[i,j]`.
    pub fn row_cdf(&self, i: usize, y: f64) -> f64 {
        row_cdf_with(self.row_atoms(i), &self.weights[i * self.k..(i + 1) * self.k], y)
    }

    /// Same grid, new weights. Used by the targeting loop.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        Self::with_weights(self.atoms.clone(), weights, self.n, self.k)
    }
}

#[inline]
pub(crate) fn row_cdf_with(atoms: &[f64], weights: &[f64], y: f64) -> f64 {
    let mut s = 0.0;
    for (a, w) in atoms.iter().zip(weights) {
        if *a > y {
            break;
        }
        s += w;
    }
    s
}

/// Build a grid with uniform weights from an `n x k` quantile matrix.
pub fn make_uniform_grid(q: &DMatrix<f64>) -> Result<GridDistribution> {
    let (n, k) = q.shape();
    if k < 2 {
        return Err(Error::TooFewColumns(k));
    }
    let mut atoms = Vec::with_capacity(n * k);
    for i in 0..n {
        atoms.extend(q.row(i).iter().copied());
    }
    GridDistribution::uniform(atoms, n, k)
}

/// Per-unit weights used when averaging row CDFs into a marginal.
#[derive(Debug, Clone, Copy)]
pub enum UnitWeights<'a> {
    Uniform,
    Custom(&'a [f64]),
}

impl UnitWeights<'_> {
    /// Normalized weights, summing to one.
    pub fn normalized(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            UnitWeights::Uniform => Ok(vec![1.0 / n as f64; n]),
            UnitWeights::Custom(w) => {
                if w.len() != n {
                    return Err(Error::invalid(format!(
                        "{} unit weights for {} rows",
                        w.len(),
                        n
                    )));
                }
                if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(Error::invalid("unit weights must be finite and nonnegative"));
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::ZeroWeights);
                }
                Ok(w.iter().map(|v| v / total).collect())
            }
        }
    }
}

/// Marginal step-function CDF over merged, sorted atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalCdf {
    locations: Vec<f64>,
    masses: Vec<f64>,
    cumulative: Vec<f64>,
}

impl MarginalCdf {
    /// From arbitrary `(location, mass)` pairs; masses are normalized.
    pub fn from_atoms(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.iter().any(|(y, m)| !y.is_finite() || !(*m >= 0.0)) {
            return Err(Error::invalid("atoms must have finite locations and nonnegative mass"));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if total <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Self { locations: vec![], masses: vec![], cumulative: vec![] };
        let mut cum = 0.0;
        for (y, m) in atoms {
            let m = m / total;
            cum += m;
            out.push_merged(y, m, cum);
        }
        Ok(out)
    }

    fn push_merged(&mut self, y: f64, m: f64, cum: f64) {
        match self.locations.last() {
            Some(&last) if last == y => {
                *self.masses.last_mut().unwrap() += m;
                *self.cumulative.last_mut().unwrap() = cum;
            }
            _ => {
                self.locations.push(y);
                self.masses.push(m);
                self.cumulative.push(cum);
            }
        }
    }

    pub fn evaluate(&self, y: f64) -> f64 {
        let j = self.locations.partition_point(|&a| a <= y);
        if j == 0 {
            0.0
        } else {
            self.cumulative[j - 1]
        }
    }

    pub fn support_hint(&self) -> (f64, f64) {
        (self.locations[0], *self.locations.last().unwrap())
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }
}

/// Sort order of every atom of a grid. Tilting changes weights but never
/// locations, so one sort serves every iteration of a targeting loop.
#[derive(Debug, Clone)]
pub struct AtomOrder {
    flat: Vec<u32>,
    rows: Vec<u32>,
    locations: Vec<f64>,
}

impl AtomOrder {
    pub fn new(grid: &GridDistribution) -> Self {
        let k = grid.n_atoms();
        let mut keyed: Vec<(f64, u32)> =
            grid.atoms().iter().enumerate().map(|(j, &a)| (a, j as u32)).collect();
        keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let flat: Vec<u32> = keyed.iter().map(|p| p.1).collect();
        let rows = flat.iter().map(|&j| j / k as u32).collect();
        let locations = keyed.into_iter().map(|p| p.0).collect();
        Self { flat, rows, locations }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Sorted `(location, row, flat index)` triples.
    pub fn iter(&self) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        self.locations
            .iter()
            .zip(&self.rows)
            .zip(&self.flat)
            .map(|((&y, &r), &j)| (y, r as usize, j as usize))
    }

    /// Marginal CDF of `sum_i omega_i G(. | x_i)` for normalized `omega`.
    pub fn marginal(&self, weights: &[f64], omega: &[f64]) -> MarginalCdf {
        let mut out = MarginalCdf { locations: vec![], masses: vec![], cumulative: vec![] };
        let mut cum = 0.0;
        for (y, r, j) in self.iter() {
            let m = omega[r] * weights[j];
            cum += m;
            out.push_merged(y, m, cum);
        }
        out
    }

    /// `inf{y : sum_i omega_i G(y | x_i) >= q}` without materializing the CDF.
    pub fn quantile(&self, weights: &[f64], omega: &[f64], q: f64) -> f64 {
        let n = self.locations.len();
        let mut cum = 0.0;
        let mut idx = 0;
        while idx < n {
            let y = self.locations[idx];
            while idx < n && self.locations[idx] == y {
                cum += omega[self.rows[idx] as usize] * weights[self.flat[idx] as usize];
                idx += 1;
            }
            if reaches(cum, q, 1.0) {
                return y;
            }
        }
        self.locations[n - 1]
    }
}

/// `F(y) = sum_i omega_i sum_j 1{Q[i,j] <= y} w[i,j]` with normalized `omega`.
pub fn marginal_cdf(dist: &GridDistribution, unit_weights: UnitWeights<'_>) -> Result<MarginalCdf> {
    let omega = unit_weights.normalized(dist.n_rows())?;
    Ok(AtomOrder::new(dist).marginal(dist.weights(), &omega))
}

/// Smallest atom location `y` with `F(y) >= q`.
pub fn invert_cdf(cdf: &MarginalCdf, q: f64) -> Result<f64> {
    check_level(q)?;
    let j = cdf.cumulative.partition_point(|&c| !reaches(c, q, 1.0));
    Ok(cdf.locations[j.min(cdf.locations.len() - 1)])
}

/// Self-normalized weighted quantile: the smallest order statistic whose
/// cumulative weight reaches `q` times the total weight.
pub fn weighted_quantile(y: &[f64], h: &[f64], q: f64) -> Result<f64> {
    check_level(q)?;
    if y.len() != h.len() {
        return Err(Error::invalid("values and weights differ in length"));
    }
    if h.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let mut pts: Vec<(f64, f64)> =
        y.iter().zip(h).filter(|(_, &w)| w > 0.0).map(|(&v, &w)| (v, w)).collect();
    if pts.is_empty() {
        return Err(Error::ZeroWeights);
    }
    if pts.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::invalid("weighted values must be finite"));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pts.iter().map(|p| p.1).sum();
    Ok(first_reaching(&pts, q, total).unwrap_or(pts[pts.len() - 1].0))
}

/// First tie-merged location in sorted `pts` whose running weight reaches
/// `q * total`.
pub(crate) fn first_reaching(pts: &[(f64, f64)], q: f64, total: f64) -> Option<f64> {
    let mut cum = 0.0;
    let mut idx = 0;
    while idx < pts.len() {
        let y = pts[idx].0;
        while idx < pts.len() && pts[idx].0 == y {
            cum += pts[idx].1;
            idx += 1;
        }
        if reaches(cum, q, total) {
            return Some(y);
        }
    }
    None
}
