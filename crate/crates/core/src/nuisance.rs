//! Parametric nuisance fits: logistic propensity models and linear-Gaussian
//! outcome models discretized onto quantile grids.
//!
//! Both fits standardize the covariates internally and report coefficients on
//! the original scale, intercept first.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::distribution::GridDistribution;
use crate::error::{Error, Result};

/// Lower bound on the residual standard deviation of a Gaussian fit.
pub const RESIDUAL_SD_FLOOR: f64 = 1e-6;

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Standardized {
    design: DMatrix<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

/// `[1, (x - mean) / sd]`. Constant columns are rejected as collinear with
/// the intercept.
fn standardize(x: &DMatrix<f64>) -> Result<Standardized> {
    let (n, p) = x.shape();
    let mut means = Vec::with_capacity(p);
    let mut scales = Vec::with_capacity(p);
    let mut constant = Vec::new();
    for j in 0..p {
        let col = x.column(j);
        let m = col.mean();
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * m.abs().max(1.0)) {
            constant.push(j);
        }
        means.push(m);
        scales.push(sd);
    }
    if !constant.is_empty() {
        return Err(Error::RankDeficient { columns: constant });
    }
    let design = DMatrix::from_fn(n, p + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            (x[(i, j - 1)] - means[j - 1]) / scales[j - 1]
        }
    });
    Ok(Standardized { design, means, scales })
}

impl Standardized {
    fn to_original(&self, beta: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; beta.len()];
        let mut intercept = beta[0];
        for j in 1..beta.len() {
            out[j] = beta[j] / self.scales[j - 1];
            intercept -= out[j] * self.means[j - 1];
        }
        out[0] = intercept;
        out
    }
}

/// Columns (0-based covariate indices) that are linear combinations of the
/// intercept and earlier columns, found by modified Gram-Schmidt.
fn collinear_columns(design: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..design.ncols() {
        let mut v = design.column(j).clone_owned();
        let norm0 = v.norm();
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let norm = v.norm();
        if norm <= 1e-9 * norm0.max(1.0) {
            if j > 0 {
                bad.push(j - 1);
            }
        } else {
            basis.push(v / norm);
        }
    }
    bad
}

fn check_shape(x: &DMatrix<f64>, len: usize) -> Result<()> {
    let (n, p) = x.shape();
    if len != n {
        return Err(Error::invalid(format!("{n} covariate rows but {len} responses")));
    }
    if n <= p + 1 {
        return Err(Error::invalid(format!("need more than {} rows for {} covariates, got {n}", p + 1, p)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// Intercept first.
    pub coefficients: Vec<f64>,
}

impl LogisticModel {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.coefficients[0]
            + row.iter().zip(&self.coefficients[1..]).map(|(x, b)| x * b).sum::<f64>()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        expit(self.linear_predictor(row))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                let eta = self.coefficients[0]
                    + (0..x.ncols()).map(|j| x[(i, j)] * self.coefficients[j + 1]).sum::<f64>();
                expit(eta)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    IterationCap,
    /// Complete or quasi-complete separation; coefficients are the last iterate.
    Separation,
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub status: FitStatus,
    pub iterations: usize,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest absolute score component divided by `n`.
    pub score_tol: f64,
    /// Ridge added to the information matrix for non-intercept terms
    /// (standardized scale).
    pub ridge: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self { max_iter: 100, score_tol: 1e-8, ridge: 0.0 }
    }
}

/// Maximum likelihood logistic regression of `t` on `x` with an intercept.
pub fn fit_logistic(x: &DMatrix<f64>, t: &[bool]) -> Result<LogisticFit> {
    let labels: Vec<f64> = t.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    fit_logistic_with(x, &labels, LogisticOptions::default())
}

/// IRLS with step halving on the log-likelihood. Labels are 0/1 reals.
pub fn fit_logistic_with(x: &DMatrix<f64>, labels: &[f64], opts: LogisticOptions) -> Result<LogisticFit> {
    check_shape(x, labels.len())?;
    let n = labels.len();
    let ones = labels.iter().filter(|&&v| v > 0.5).count();
    if ones == 0 || ones == n {
        return Err(Error::invalid("binary response is constant"));
    }
    let std = standardize(x)?;
    let z = &std.design;
    let q = z.ncols();
    let y = DVector::from_column_slice(labels);

    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = z * beta;
        eta.iter().zip(y.iter()).map(|(&e, &t)| t * e - softplus(e)).sum::<f64>()
            - 0.5 * opts.ridge * beta.rows(1, q - 1).norm_squared()
    };

    let mean = labels.iter().sum::<f64>() / n as f64;
    let mut beta = DVector::zeros(q);
    beta[0] = (mean / (1.0 - mean)).ln();
    let mut ll = loglik(&beta);
    let mut status = FitStatus::IterationCap;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;
        let eta = z * &beta;
        let p = eta.map(expit);
        let w = p.map(|v| v * (1.0 - v));
        let mut score = z.tr_mul(&(&y - &p));
        for j in 1..q {
            score[j] -= opts.ridge * beta[j];
        }
        if score.amax() / n as f64 <= opts.score_tol {
            status = FitStatus::Converged;
            break;
        }
        let mut wz = z.clone();
        for mut col in wz.column_iter_mut() {
            col.component_mul_assign(&w);
        }
        let mut info = z.tr_mul(&wz);
        for j in 1..q {
            info[(j, j)] += opts.ridge;
        }
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => {
                if perfect_fit(&p, labels) {
                    status = FitStatus::Separation;
                    break;
                }
                return Err(Error::Singular);
            }
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let cand_ll = loglik(&cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || step.amax() * scale < 1e-14 * beta.amax().max(1.0) {
            status = if perfect_fit(&p, labels) { FitStatus::Separation } else { FitStatus::Converged };
            break;
        }
        if beta.rows(1, q - 1).amax() > 1e3 {
            status = FitStatus::Separation;
            break;
        }
    }

    let coefficients = std.to_original(&beta);
    if status != FitStatus::Separation
        && (coefficients.iter().any(|c| c.abs() > 1e3) || ll / n as f64 > -1e-6)
    {
        status = FitStatus::Separation;
    }
    Ok(LogisticFit { model: LogisticModel { coefficients }, status, iterations, log_likelihood: ll })
}

fn perfect_fit(p: &DVector<f64>, labels: &[f64]) -> bool {
    p.iter().zip(labels).all(|(&pi, &t)| (pi - t).abs() < 1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRegressionModel {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub residual_sd: f64,
}

impl GaussianRegressionModel {
    pub fn mean_row(&self, row: &[f64]) -> f64 {
        self.coefficients[0]
            + row.iter().zip(&self.coefficients[1..]).map(|(x, b)| x * b).sum::<f64>()
    }

    pub fn predict_mean(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                self.coefficients[0]
                    + (0..x.ncols()).map(|j| x[(i, j)] * self.coefficients[j + 1]).sum::<f64>()
            })
            .collect()
    }
}

/// Ordinary least squares with `residual_sd = sqrt(RSS / (n - p - 1))`,
/// floored at [`RESIDUAL_SD_FLOOR`].
pub fn fit_gaussian_regression(x: &DMatrix<f64>, y: &[f64]) -> Result<GaussianRegressionModel> {
    check_shape(x, y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("regression response has non-finite values"));
    }
    let std = standardize(x)?;
    let bad = collinear_columns(&std.design);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    let z = &std.design;
    let yv = DVector::from_column_slice(y);
    let qr = z.clone().qr();
    let beta = qr
        .r()
        .solve_upper_triangular(&qr.q().tr_mul(&yv))
        .filter(|b| b.iter().all(|v| v.is_finite()))
        .ok_or(Error::Singular)
        .or_else(|_| {
            let gram = z.transpose() * z;
            gram.cholesky().map(|c| c.solve(&(z.transpose() * &yv))).ok_or(Error::Singular)
        })?;
    let resid = &yv - z * &beta;
    let dof = (x.nrows() - x.ncols() - 1) as f64;
    let residual_sd = (resid.norm_squared() / dof).sqrt().max(RESIDUAL_SD_FLOOR);
    Ok(GaussianRegressionModel { coefficients: std.to_original(&beta), residual_sd })
}

/// Standard-normal quantiles at levels `1/k, 2/k, ..., (k-1)/k`.
pub fn standard_normal_levels(k: usize) -> Vec<f64> {
    let z = Normal::standard();
    (1..k).map(|j| z.inverse_cdf(j as f64 / k as f64)).collect()
}

/// Row `i` holds the `k - 1` Gaussian quantiles at levels `1/k .. 1 - 1/k`
/// around the fitted mean of `x_i`, all with uniform weight.
pub fn discretize_gaussian(model: &GaussianRegressionModel, x: &DMatrix<f64>, k: usize) -> Result<GridDistribution> {
    if k < 2 {
        return Err(Error::invalid(format!("grid size must be at least 2, got {k}")));
    }
    if x.ncols() + 1 != model.coefficients.len() {
        return Err(Error::invalid("covariate count does not match the fitted model"));
    }
    let levels = standard_normal_levels(k);
    let sd = model.residual_sd.max(RESIDUAL_SD_FLOOR);
    let means = model.predict_mean(x);
    let mut atoms = Vec::with_capacity(means.len() * levels.len());
    for mu in &means {
        atoms.extend(levels.iter().map(|z| mu + sd * z));
    }
    GridDistribution::uniform(atoms, means.len(), levels.len())
}
