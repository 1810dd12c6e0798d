//! Observation tables and fitted nuisance parameters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distribution::GridDistribution;
use crate::error::{Error, Result};

/// Lower clamp applied to every fitted propensity.
pub const PROPENSITY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandKind {
    /// Quantile of an outcome observed only when the indicator is 1.
    MissingOutcome,
    /// Quantile of the control potential outcome among treated units.
    EffectOnTreated,
}

/// Covariates, a binary indicator and an outcome for `n` units.
///
/// The indicator is the missingness flag `M` (1 = observed) for
/// [`EstimandKind::MissingOutcome`] and the treatment flag `T` for
/// [`EstimandKind::EffectOnTreated`]. Unobserved outcomes are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    indicator: Vec<bool>,
    outcome: Vec<f64>,
    kind: EstimandKind,
}

impl Dataset {
    pub fn new(
        covariates: DMatrix<f64>,
        indicator: Vec<bool>,
        outcome: Vec<f64>,
        kind: EstimandKind,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if n == 0 {
            return Err(Error::invalid("dataset has no rows"));
        }
        if indicator.len() != n || outcome.len() != n {
            return Err(Error::invalid(format!(
                "length mismatch: {} covariate rows, {} indicators, {} outcomes",
                n,
                indicator.len(),
                outcome.len()
            )));
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite covariate at row {}, column {}",
                pos % n,
                pos / n
            )));
        }
        for (i, (&m, &y)) in indicator.iter().zip(&outcome).enumerate() {
            let needed = match kind {
                EstimandKind::MissingOutcome => m,
                EstimandKind::EffectOnTreated => true,
            };
            if needed && !y.is_finite() {
                return Err(Error::invalid(format!("outcome missing or non-finite at row {i}")));
            }
        }
        Ok(Self { covariates, indicator, outcome, kind })
    }

    pub fn n(&self) -> usize {
        self.indicator.len()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn kind(&self) -> EstimandKind {
        self.kind
    }

    pub fn indicator_f64(&self) -> Vec<f64> {
        self.indicator.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn count_indicated(&self) -> usize {
        self.indicator.iter().filter(|&&m| m).count()
    }

    /// Missing-outcome view of one treatment arm: the arm's membership becomes
    /// the observation indicator and outcomes of the other arm are hidden.
    pub fn arm(&self, treated: bool) -> Result<Dataset> {
        let indicator: Vec<bool> = self.indicator.iter().map(|&t| t == treated).collect();
        let outcome = self
            .outcome
            .iter()
            .zip(&indicator)
            .map(|(&y, &m)| if m { y } else { f64::NAN })
            .collect();
        Dataset::new(self.covariates.clone(), indicator, outcome, EstimandKind::MissingOutcome)
    }

    /// Covariate rows and outcomes of units with indicator = 1.
    pub fn indicated_rows(&self) -> (DMatrix<f64>, Vec<f64>) {
        let rows: Vec<usize> = (0..self.n()).filter(|&i| self.indicator[i]).collect();
        let x = self.covariates.select_rows(rows.iter());
        let y = rows.iter().map(|&i| self.outcome[i]).collect();
        (x, y)
    }
}

/// Per-unit fitted propensity values, clamped away from zero (and from one
/// when built with [`Propensity::two_sided`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Propensity(Vec<f64>);

impl Propensity {
    /// Clamp to `[1e-10, 1]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::clamped(values, 1.0)
    }

    /// Clamp to `[1e-10, 1 - 1e-10]`.
    pub fn two_sided(values: Vec<f64>) -> Result<Self> {
        Self::clamped(values, 1.0 - PROPENSITY_FLOOR)
    }

    fn clamped(values: Vec<f64>, upper: f64) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::invalid(format!("propensity is NaN at unit {i}")));
        }
        Ok(Self(values.into_iter().map(|v| v.clamp(PROPENSITY_FLOOR, upper)).collect()))
    }

    /// Propensity of the complementary arm, `1 - e`, clamped the same way.
    pub fn complement(&self) -> Self {
        Self(self.0.iter().map(|&e| (1.0 - e).clamp(PROPENSITY_FLOOR, 1.0)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fitted propensity and conditional outcome distribution, aligned with the
/// rows of a [`Dataset`].
#[derive(Debug, Clone)]
pub struct NuisancePair {
    pub propensity: Propensity,
    pub conditional: GridDistribution,
}

impl NuisancePair {
    pub fn new(propensity: Propensity, conditional: GridDistribution) -> Result<Self> {
        if propensity.len() != conditional.n_rows() {
            return Err(Error::invalid(format!(
                "propensity has {} units but the grid has {} rows",
                propensity.len(),
                conditional.n_rows()
            )));
        }
        Ok(Self { propensity, conditional })
    }

    pub(crate) fn check_aligned(&self, data: &Dataset) -> Result<()> {
        if self.propensity.len() != data.n() {
            return Err(Error::invalid(format!(
                "nuisance fits cover {} units, dataset has {}",
                self.propensity.len(),
                data.n()
            )));
        }
        Ok(())
    }
}
