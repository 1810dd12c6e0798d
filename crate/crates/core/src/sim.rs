//! Kang-Schafer simulation: data generation, the four misspecification
//! scenarios, parallel Monte Carlo replications and summary tables.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EstimandKind, NuisancePair, Propensity};
use crate::density_sl::{fit_density_super_learner, to_grid};
use crate::distribution::{AtomOrder, GridDistribution};
use crate::error::{Error, Result, Warning};
use crate::estimators::{
    estimate_aipw_with_order, estimate_firpo, estimate_ipw, estimate_od_with_order, tmle_missing_with_order,
    EffectFit, TmleFit,
};
use crate::inference::{effect_report, wald_test};
use crate::nuisance::{discretize_gaussian, expit, fit_gaussian_regression, fit_logistic, FitStatus};

/// Median of both potential outcomes before any shift. The outcome is
/// normal with mean 210 and does not depend on treatment.
pub const KS_MEDIAN: f64 = 210.0;

/// Simulated units: latent covariates `w`, observed transformations `x`,
/// treatment and outcome.
#[derive(Debug, Clone)]
pub struct KsSample {
    pub w: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub t: Vec<bool>,
    pub y: Vec<f64>,
    pub propensity: Vec<f64>,
}

/// Draws `n` units. Treated outcomes are shifted by `shift`, so the true
/// quantile treatment effect is `shift` at every level.
pub fn generate_ks<R: Rng + ?Sized>(n: usize, rng: &mut R, shift: f64) -> KsSample {
    let mut w = DMatrix::zeros(n, 4);
    let mut x = DMatrix::zeros(n, 4);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    for i in 0..n {
        let z: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let e = expit(-z[0] + 0.5 * z[1] - 0.25 * z[2] - 0.1 * z[3]);
        let treated = rng.random::<f64>() < e;
        let noise: f64 = StandardNormal.sample(rng);
        let base = 210.0 + 27.4 * z[0] + 13.7 * (z[1] + z[2] + z[3]) + noise;
        for j in 0..4 {
            w[(i, j)] = z[j];
        }
        x[(i, 0)] = (z[0] / 2.0).exp();
        x[(i, 1)] = z[1] / (1.0 + z[0].exp()) + 10.0;
        x[(i, 2)] = (z[0] * z[2] / 25.0 + 0.6).powi(3);
        x[(i, 3)] = (z[1] + z[3] + 20.0).powi(2);
        t.push(treated);
        y.push(if treated { base + shift } else { base });
        propensity.push(e);
    }
    KsSample { w, x, t, y, propensity }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Both models on the latent covariates.
    A,
    /// Outcome model correct, propensity model on the transformations.
    B,
    /// Propensity model correct, outcome model on the transformations.
    C,
    /// Both models on the transformations.
    D,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::A, Scenario::B, Scenario::C, Scenario::D];

    pub fn outcome_correct(self) -> bool {
        matches!(self, Scenario::A | Scenario::B)
    }

    pub fn propensity_correct(self) -> bool {
        matches!(self, Scenario::A | Scenario::C)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::A => "a",
            Scenario::B => "b",
            Scenario::C => "c",
            Scenario::D => "d",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Scenario::A),
            "b" => Ok(Scenario::B),
            "c" => Ok(Scenario::C),
            "d" => Ok(Scenario::D),
            other => Err(Error::invalid(format!("unknown scenario '{other}', expected a, b, c, d or all"))),
        }
    }
}

/// Parses `all` or a comma-separated list of scenario letters.
pub fn parse_scenarios(s: &str) -> Result<Vec<Scenario>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(Scenario::ALL.to_vec());
    }
    let mut out: Vec<Scenario> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Tmle,
    Aipw,
    Ipw,
    Firpo,
    Od,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [Estimator::Tmle, Estimator::Aipw, Estimator::Ipw, Estimator::Firpo, Estimator::Od];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Tmle => "tmle",
            Estimator::Aipw => "aipw",
            Estimator::Ipw => "ipw",
            Estimator::Firpo => "firpo",
            Estimator::Od => "od",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown estimator '{s}'")))
    }
}

/// Parses `all` or a comma-separated list of estimator names.
pub fn parse_estimators(s: &str) -> Result<Vec<Estimator>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(Estimator::ALL.to_vec());
    }
    let mut out: Vec<Estimator> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeModel {
    /// Linear regression with normal errors, discretized at quantile levels.
    #[default]
    Gaussian,
    /// Stacked hazard-histogram density super learner.
    DensitySl,
}

impl FromStr for OutcomeModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(OutcomeModel::Gaussian),
            "density-sl" => Ok(OutcomeModel::DensitySl),
            other => Err(Error::invalid(format!("unknown outcome model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    pub reps: usize,
    pub scenarios: Vec<Scenario>,
    pub q_levels: Vec<f64>,
    pub grid_size: usize,
    pub seed: u64,
    /// Additive effect on treated outcomes.
    pub shift: f64,
    pub ci_level: f64,
    pub outcome_model: OutcomeModel,
    /// Worker threads; `None` uses the global rayon pool. Left out of
    /// serialized output so results do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n: 500,
            reps: 1000,
            scenarios: Scenario::ALL.to_vec(),
            q_levels: vec![0.5],
            grid_size: 500,
            seed: 20110101,
            shift: 0.0,
            ci_level: 0.95,
            outcome_model: OutcomeModel::Gaussian,
            threads: None,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::invalid("reps must be at least 1"));
        }
        if self.n < 20 {
            return Err(Error::invalid("n must be at least 20"));
        }
        if self.scenarios.is_empty() {
            return Err(Error::invalid("no scenarios selected"));
        }
        if self.q_levels.is_empty() {
            return Err(Error::invalid("no quantile levels given"));
        }
        for &q in &self.q_levels {
            crate::distribution::check_level(q)?;
        }
        if self.grid_size < 2 {
            return Err(Error::TooFewColumns(self.grid_size));
        }
        crate::inference::critical_value(self.ci_level)?;
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be positive"));
        }
        if !self.shift.is_finite() {
            return Err(Error::invalid("shift must be finite"));
        }
        Ok(())
    }
}

/// Propensity fit and per-arm outcome grids for one covariate basis.
pub struct BasisFits {
    pub propensity: Propensity,
    pub propensity_status: FitStatus,
    pub treated_grid: GridDistribution,
    pub control_grid: GridDistribution,
    pub treated_order: AtomOrder,
    pub control_order: AtomOrder,
}

impl BasisFits {
    pub fn fit(data: &Dataset, model: OutcomeModel, grid_size: usize, seed: u64) -> Result<Self> {
        let logit = fit_logistic(data.covariates(), data.indicator())?;
        let e = logit.model.predict(data.covariates());
        let treated_grid = outcome_grid(&data.arm(true)?, model, grid_size, seed)?;
        let control_grid = outcome_grid(&data.arm(false)?, model, grid_size, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(Self {
            propensity: Propensity::two_sided(e)?,
            propensity_status: logit.status,
            treated_order: AtomOrder::new(&treated_grid),
            control_order: AtomOrder::new(&control_grid),
            treated_grid,
            control_grid,
        })
    }
}

/// Conditional outcome grid for every unit, fit on the units with
/// indicator 1.
pub fn outcome_grid(data: &Dataset, model: OutcomeModel, grid_size: usize, seed: u64) -> Result<GridDistribution> {
    match model {
        OutcomeModel::Gaussian => {
            let (x, y) = data.indicated_rows();
            let fit = fit_gaussian_regression(&x, &y)?;
            discretize_gaussian(&fit, data.covariates(), grid_size)
        }
        OutcomeModel::DensitySl => {
            let stacked = fit_density_super_learner(data, 5, seed)?;
            to_grid(&stacked, data.covariates(), grid_size)
        }
    }
}

/// Arm-wise nuisance pairs for a scenario: treated arm with `P(T = 1 | .)`,
/// control arm with `P(T = 0 | .)`.
pub fn fit_scenario(
    sample: &KsSample,
    scenario: Scenario,
    model: OutcomeModel,
    grid_size: usize,
) -> Result<(NuisancePair, NuisancePair)> {
    let data_w = Dataset::new(sample.w.clone(), sample.t.clone(), sample.y.clone(), EstimandKind::EffectOnTreated)?;
    let data_x = Dataset::new(sample.x.clone(), sample.t.clone(), sample.y.clone(), EstimandKind::EffectOnTreated)?;
    let on_w = BasisFits::fit(&data_w, model, grid_size, 0)?;
    let on_x = BasisFits::fit(&data_x, model, grid_size, 0)?;
    let (prop, out) = pick(scenario, &on_w, &on_x);
    Ok((
        NuisancePair::new(prop.propensity.clone(), out.treated_grid.clone())?,
        NuisancePair::new(prop.propensity.complement(), out.control_grid.clone())?,
    ))
}

fn pick<'a>(scenario: Scenario, on_w: &'a BasisFits, on_x: &'a BasisFits) -> (&'a BasisFits, &'a BasisFits) {
    let prop = if scenario.propensity_correct() { on_w } else { on_x };
    let out = if scenario.outcome_correct() { on_w } else { on_x };
    (prop, out)
}

/// One estimator's effect estimate in one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellEstimate {
    pub estimate: f64,
    pub covered: Option<bool>,
    pub rejected: Option<bool>,
    pub iterations: Option<f64>,
}

/// Per-run checks on the targeting loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TmleAudit {
    pub runs: usize,
    pub converged: usize,
    /// Converged runs whose score residual is within `5e-4 n^-0.6`.
    pub score_ok: usize,
    /// Runs whose tilted log-likelihood never decreased.
    pub monotone: usize,
}

impl TmleAudit {
    fn record(&mut self, fit: &TmleFit, n: usize) {
        let d = &fit.diagnostics;
        self.runs += 1;
        if d.converged {
            self.converged += 1;
            if d.score_residual <= score_bound(n) {
                self.score_ok += 1;
            }
        }
        if d.likelihood_nondecreasing() {
            self.monotone += 1;
        }
    }

    fn merge(&mut self, other: &TmleAudit) {
        self.runs += other.runs;
        self.converged += other.converged;
        self.score_ok += other.score_ok;
        self.monotone += other.monotone;
    }
}

/// Tolerance on the empirical mean of the estimating function after targeting.
pub fn score_bound(n: usize) -> f64 {
    5e-4 * (n as f64).powf(-0.6)
}

/// All cells of one replication, ordered by scenario, level, estimator.
#[derive(Debug, Clone)]
pub struct Replication {
    pub cells: Vec<std::result::Result<CellEstimate, String>>,
    pub audit: TmleAudit,
    pub warnings: Vec<Warning>,
}

struct ArmContext<'a> {
    data: Dataset,
    nuis: NuisancePair,
    order: &'a AtomOrder,
}

fn arm_estimate(
    est: Estimator,
    treated: &ArmContext,
    control: &ArmContext,
    q: f64,
) -> Result<f64> {
    let one = |arm: &ArmContext| -> Result<f64> {
        match est {
            Estimator::Aipw => Ok(estimate_aipw_with_order(&arm.data, &arm.nuis, arm.order, q)?.theta),
            Estimator::Ipw => Ok(estimate_ipw(&arm.data, &arm.nuis.propensity, q)?.theta),
            Estimator::Firpo => estimate_firpo(&arm.data, &arm.nuis.propensity, q),
            Estimator::Od => estimate_od_with_order(&arm.data, &arm.nuis.conditional, arm.order, q),
            Estimator::Tmle => unreachable!("targeted estimates are handled separately"),
        }
    };
    Ok(one(treated)? - one(control)?)
}

/// Runs every scenario, level and estimator on one simulated dataset.
pub fn run_replication(spec: &ScenarioSpec, rep: usize) -> Replication {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(rep as u64);
    let sample = generate_ks(spec.n, &mut rng, spec.shift);
    let sl_seed: u64 = rng.random();
    let n_cells = spec.scenarios.len() * spec.q_levels.len() * Estimator::ALL.len();
    let mut audit = TmleAudit::default();
    let mut warnings = Vec::new();

    let needs_w = spec.scenarios.iter().any(|s| s.outcome_correct() || s.propensity_correct());
    let needs_x = spec.scenarios.iter().any(|s| !s.outcome_correct() || !s.propensity_correct());
    let fit_basis = |cov: &DMatrix<f64>, needed: bool| -> Option<std::result::Result<BasisFits, String>> {
        needed.then(|| {
            Dataset::new(cov.clone(), sample.t.clone(), sample.y.clone(), EstimandKind::EffectOnTreated)
                .and_then(|d| BasisFits::fit(&d, spec.outcome_model, spec.grid_size, sl_seed))
                .map_err(|e| e.to_string())
        })
    };
    let on_w = fit_basis(&sample.w, needs_w);
    let on_x = fit_basis(&sample.x, needs_x);

    let data = match Dataset::new(sample.w.clone(), sample.t.clone(), sample.y.clone(), EstimandKind::EffectOnTreated)
        .and_then(|d| Ok((d.arm(true)?, d.arm(false)?, d)))
    {
        Ok(d) => d,
        Err(e) => {
            return Replication { cells: vec![Err(e.to_string()); n_cells], audit, warnings };
        }
    };
    let (treated_data, control_data, full) = data;

    let mut cells = Vec::with_capacity(n_cells);
    for &scenario in &spec.scenarios {
        let get = |correct: bool| -> std::result::Result<&BasisFits, String> {
            let slot = if correct { &on_w } else { &on_x };
            match slot.as_ref().expect("basis fitted when needed") {
                Ok(b) => Ok(b),
                Err(e) => Err(e.clone()),
            }
        };
        let fits = get(scenario.propensity_correct()).and_then(|p| Ok((p, get(scenario.outcome_correct())?)));
        let (prop, out) = match fits {
            Ok(f) => f,
            Err(e) => {
                cells.extend(std::iter::repeat_n(Err(e), spec.q_levels.len() * Estimator::ALL.len()));
                continue;
            }
        };
        if prop.propensity_status == FitStatus::Separation && !warnings.contains(&Warning::Separation) {
            warnings.push(Warning::Separation);
        }
        let treated = ArmContext {
            data: treated_data.clone(),
            nuis: NuisancePair { propensity: prop.propensity.clone(), conditional: out.treated_grid.clone() },
            order: &out.treated_order,
        };
        let control = ArmContext {
            data: control_data.clone(),
            nuis: NuisancePair { propensity: prop.propensity.complement(), conditional: out.control_grid.clone() },
            order: &out.control_order,
        };
        for &q in &spec.q_levels {
            for est in Estimator::ALL {
                let cell = if est == Estimator::Tmle {
                    tmle_cell(spec, &full, &treated, &control, q, &mut audit)
                } else {
                    arm_estimate(est, &treated, &control, q).map(|estimate| CellEstimate {
                        estimate,
                        covered: None,
                        rejected: None,
                        iterations: None,
                    })
                };
                cells.push(cell.map_err(|e| e.to_string()));
            }
        }
    }
    Replication { cells, audit, warnings }
}

fn tmle_cell(
    spec: &ScenarioSpec,
    full: &Dataset,
    treated: &ArmContext,
    control: &ArmContext,
    q: f64,
    audit: &mut TmleAudit,
) -> Result<CellEstimate> {
    let t_fit = tmle_missing_with_order(&treated.data, &treated.nuis, treated.order, q)?;
    audit.record(&t_fit, treated.data.n());
    let c_fit = tmle_missing_with_order(&control.data, &control.nuis, control.order, q)?;
    audit.record(&c_fit, control.data.n());
    let iterations = 0.5 * (t_fit.diagnostics.iterations + c_fit.diagnostics.iterations) as f64;
    let fit = EffectFit { effect: t_fit.theta - c_fit.theta, treated: t_fit, control: c_fit };
    let report = effect_report(
        full,
        &fit,
        &treated.nuis.propensity,
        &control.nuis.propensity,
        (Some(treated.order), Some(control.order)),
        q,
        spec.ci_level,
    )?;
    let interval = report.interval.expect("effect reports carry an interval");
    let covered = interval.lower <= spec.shift && spec.shift <= interval.upper;
    let alpha = 1.0 - spec.ci_level;
    let rejected = wald_test(fit.effect, interval.se).p_value < alpha;
    Ok(CellEstimate { estimate: fit.effect, covered: Some(covered), rejected: Some(rejected), iterations: Some(iterations) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub n: usize,
    pub q: f64,
    pub estimator: Estimator,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub coverage: Option<f64>,
    /// Successful replications.
    pub reps: usize,
    pub failures: usize,
    pub rejection_rate: Option<f64>,
    pub mean_iterations: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub spec: ScenarioSpec,
    pub truth: f64,
    pub rows: Vec<SummaryRow>,
    pub audit: TmleAudit,
    /// Replications with at least one failed cell.
    pub failed_replications: usize,
}

impl SimulationSummary {
    pub fn row(&self, scenario: Scenario, q: f64, estimator: Estimator) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.q == q && r.estimator == estimator)
    }

    pub fn failure_fraction(&self) -> f64 {
        self.failed_replications as f64 / self.spec.reps as f64
    }
}

/// Population moments of `errors`: (bias, sd, rmse).
fn moments(errors: &[f64]) -> (f64, f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let m = errors.len() as f64;
    let bias = errors.iter().sum::<f64>() / m;
    let var = errors.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / m;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / m;
    (bias, var.sqrt(), mse.sqrt())
}

fn mean_flag(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for f in flags {
        total += 1;
        hit += f as usize;
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Aggregates replications in index order.
pub fn summarize(spec: &ScenarioSpec, reps: &[Replication]) -> SimulationSummary {
    let truth = spec.shift;
    let mut rows = Vec::new();
    let mut idx = 0;
    for &scenario in &spec.scenarios {
        for &q in &spec.q_levels {
            for estimator in Estimator::ALL {
                let ok: Vec<&CellEstimate> = reps.iter().filter_map(|r| r.cells[idx].as_ref().ok()).collect();
                let errors: Vec<f64> = ok.iter().map(|c| c.estimate - truth).collect();
                let (bias, sd, rmse) = moments(&errors);
                let iterations: Vec<f64> = ok.iter().filter_map(|c| c.iterations).collect();
                rows.push(SummaryRow {
                    scenario,
                    n: spec.n,
                    q,
                    estimator,
                    bias,
                    sd,
                    rmse,
                    coverage: mean_flag(ok.iter().filter_map(|c| c.covered)),
                    reps: ok.len(),
                    failures: reps.len() - ok.len(),
                    rejection_rate: mean_flag(ok.iter().filter_map(|c| c.rejected)),
                    mean_iterations: (!iterations.is_empty())
                        .then(|| iterations.iter().sum::<f64>() / iterations.len() as f64),
                });
                idx += 1;
            }
        }
    }
    let mut audit = TmleAudit::default();
    reps.iter().for_each(|r| audit.merge(&r.audit));
    let failed_replications = reps.iter().filter(|r| r.cells.iter().any(|c| c.is_err())).count();
    SimulationSummary { spec: spec.clone(), truth, rows, audit, failed_replications }
}

/// Runs all replications, in parallel when threads allow, and aggregates
/// them in replication order. Output does not depend on the thread count.
pub fn run_monte_carlo(spec: &ScenarioSpec) -> Result<SimulationSummary> {
    spec.validate()?;
    let work = || (0..spec.reps).into_par_iter().map(|rep| run_replication(spec, rep)).collect::<Vec<_>>();
    let reps = match spec.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(summarize(spec, &reps))
}

/// CSV rendering of the summary rows.
pub fn summary_csv(summary: &SimulationSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &summary.rows {
        w.serialize(row).map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
}
