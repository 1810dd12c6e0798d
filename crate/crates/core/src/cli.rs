//! Command-line front end: CSV ingestion, configuration merging and the
//! `estimate`, `simulate` and `report` commands.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EstimandKind, NuisancePair, Propensity};
use crate::distribution::AtomOrder;
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_aipw_with_order, estimate_firpo, estimate_ipw, estimate_od_with_order, tmle_att_with_order,
    tmle_missing_with_order, EffectFit,
};
use crate::inference::{effect_report, tmle_report, EstimateReport};
use crate::sim::{
    parse_estimators, parse_scenarios, run_monte_carlo, summary_csv, outcome_grid, Estimator, OutcomeModel,
    ScenarioSpec, SimulationSummary,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Share of failed replications above which `simulate` exits with code 4.
pub const MAX_FAILED_SHARE: f64 = 0.05;

pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const INPUT: i32 = 2;
    pub const ESTIMATION: i32 = 3;
    pub const PARTIAL_FAILURE: i32 = 4;
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(e: impl std::fmt::Display) -> Self {
        Self { code: exit::INPUT, message: e.to_string() }
    }

    fn estimation(context: &str, e: impl std::fmt::Display) -> Self {
        Self { code: exit::ESTIMATION, message: format!("{context}: {e}") }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(name = "qtmle", version, about = "Targeted and doubly robust quantile estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate quantiles or quantile effects from a CSV dataset.
    Estimate(EstimateArgs),
    /// Run the Kang-Schafer Monte Carlo study.
    Simulate(SimulateArgs),
    /// Render a saved simulation summary as a table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    /// Quantile of an outcome missing at random (`m` column).
    Missing,
    /// Difference of arm quantiles (`t` column).
    Effect,
    /// Control quantile among the treated (`t` column).
    Att,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutcomeModelArg {
    Gaussian,
    DensitySl,
}

impl From<OutcomeModelArg> for OutcomeModel {
    fn from(a: OutcomeModelArg) -> Self {
        match a {
            OutcomeModelArg::Gaussian => OutcomeModel::Gaussian,
            OutcomeModelArg::DensitySl => OutcomeModel::DensitySl,
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Comma-separated quantile levels.
    #[arg(long)]
    pub q: Option<String>,
    #[arg(long, value_enum)]
    pub estimand: Option<Estimand>,
    /// `all` or a comma-separated subset of tmle, aipw, ipw, firpo, od.
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub ci_level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub outcome_model: Option<OutcomeModelArg>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// TOML file with defaults for any of the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `all` or a comma-separated list of a, b, c, d.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub q: Option<String>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub ci_level: Option<f64>,
    /// Additive effect applied to treated outcomes.
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub outcome_model: Option<OutcomeModelArg>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON summary written by `simulate --format json`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Settings readable from a TOML file; every field is optional and command
/// line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub q: Option<Vec<f64>>,
    pub estimand: Option<Estimand>,
    pub estimators: Option<Vec<String>>,
    pub scenario: Option<Vec<String>>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub grid_size: Option<usize>,
    pub ci_level: Option<f64>,
    pub shift: Option<f64>,
    pub threads: Option<usize>,
    pub outcome_model: Option<String>,
    pub format: Option<Format>,
    pub output: Option<PathBuf>,
}

pub fn load_config(path: Option<&Path>) -> std::result::Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_levels(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            let q: f64 = v.trim().parse().map_err(|_| Error::invalid(format!("bad quantile level '{v}'")))?;
            crate::distribution::check_level(q)?;
            Ok(q)
        })
        .collect()
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub q_levels: Vec<f64>,
    pub estimand: Estimand,
    pub estimators: Vec<Estimator>,
    pub spec: ScenarioSpec,
    pub format: Format,
    pub output: Option<PathBuf>,
}

fn merge_common(
    file: &FileConfig,
    q: Option<&str>,
    grid: Option<usize>,
    ci: Option<f64>,
    seed: Option<u64>,
    model: Option<OutcomeModelArg>,
) -> Result<(Vec<f64>, ScenarioSpec)> {
    let q_levels = match (q, &file.q) {
        (Some(s), _) => parse_levels(s)?,
        (None, Some(v)) => {
            v.iter().try_for_each(|&q| crate::distribution::check_level(q))?;
            v.clone()
        }
        (None, None) => vec![0.5],
    };
    let outcome_model = match (model, &file.outcome_model) {
        (Some(m), _) => m.into(),
        (None, Some(s)) => s.parse()?,
        (None, None) => OutcomeModel::Gaussian,
    };
    let base = ScenarioSpec::default();
    let spec = ScenarioSpec {
        q_levels: q_levels.clone(),
        grid_size: grid.or(file.grid_size).unwrap_or(base.grid_size),
        ci_level: ci.or(file.ci_level).unwrap_or(base.ci_level),
        seed: seed.or(file.seed).unwrap_or(base.seed),
        outcome_model,
        ..base
    };
    Ok((q_levels, spec))
}

impl RunConfig {
    pub fn for_estimate(args: &EstimateArgs, file: &FileConfig) -> Result<Self> {
        let (q_levels, spec) =
            merge_common(file, args.q.as_deref(), args.grid_size, args.ci_level, args.seed, args.outcome_model)?;
        let estimators = match (&args.estimators, &file.estimators) {
            (Some(s), _) => parse_estimators(s)?,
            (None, Some(v)) => parse_estimators(&v.join(","))?,
            (None, None) => Estimator::ALL.to_vec(),
        };
        let input = args.input.clone().or_else(|| file.input.clone());
        match &input {
            None => return Err(Error::invalid("--input is required")),
            Some(p) if !p.exists() => return Err(Error::invalid(format!("input file {} does not exist", p.display()))),
            _ => {}
        }
        spec.validate_levels()?;
        Ok(Self {
            input,
            q_levels,
            estimand: args.estimand.or(file.estimand).unwrap_or(Estimand::Missing),
            estimators,
            spec,
            format: args.format.or(file.format).unwrap_or_default(),
            output: args.output.clone().or_else(|| file.output.clone()),
        })
    }

    pub fn for_simulate(args: &SimulateArgs, file: &FileConfig) -> Result<Self> {
        let (q_levels, mut spec) =
            merge_common(file, args.q.as_deref(), args.grid_size, args.ci_level, args.seed, args.outcome_model)?;
        spec.scenarios = match (&args.scenario, &file.scenario) {
            (Some(s), _) => parse_scenarios(s)?,
            (None, Some(v)) => parse_scenarios(&v.join(","))?,
            (None, None) => parse_scenarios("all")?,
        };
        spec.n = args.n.or(file.n).unwrap_or(spec.n);
        spec.reps = args.reps.or(file.reps).unwrap_or(spec.reps);
        spec.shift = args.shift.or(file.shift).unwrap_or(spec.shift);
        spec.threads = args.threads.or(file.threads);
        spec.validate()?;
        Ok(Self {
            input: None,
            q_levels,
            estimand: Estimand::Effect,
            estimators: Estimator::ALL.to_vec(),
            spec,
            format: args.format.or(file.format).unwrap_or_default(),
            output: args.output.clone().or_else(|| file.output.clone()),
        })
    }
}

impl ScenarioSpec {
    fn validate_levels(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::TooFewColumns(self.grid_size));
        }
        crate::inference::critical_value(self.ci_level)?;
        Ok(())
    }
}

/// Parsed dataset with the covariate column names of the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub dataset: Dataset,
    pub covariate_names: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

/// Reads a CSV with columns `y`, an indicator `m` (observed) or `t`
/// (treated), and numeric covariates. Missing outcomes are empty cells or
/// `NA` and are allowed only where `m = 0`.
pub fn ingest_csv(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    ingest_reader(file)
}

pub fn ingest_reader(reader: impl Read) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let y_col = find("y").ok_or_else(|| Error::Csv("missing required column 'y'".into()))?;
    let (ind_col, kind) = match (find("m"), find("t")) {
        (Some(_), Some(_)) => return Err(Error::Csv("give either an 'm' or a 't' column, not both".into())),
        (Some(c), None) => (c, EstimandKind::MissingOutcome),
        (None, Some(c)) => (c, EstimandKind::EffectOnTreated),
        (None, None) => return Err(Error::Csv("missing required indicator column 'm' or 't'".into())),
    };
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != y_col && c != ind_col).collect();
    if cov_cols.is_empty() {
        return Err(Error::Csv("no covariate columns".into()));
    }
    let mut y = Vec::new();
    let mut ind = Vec::new();
    let mut cov = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        // line 1 is the header
        let line = r + 2;
        let rec = rec.map_err(|e| Error::Csv(format!("line {line}: {e}")))?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let number = |c: usize| -> Result<f64> {
            cell(c).parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Csv(format!("line {line}, column '{}': not a finite number: '{}'", headers[c], cell(c)))
            })
        };
        let flag = match cell(ind_col) {
            "1" | "1.0" | "true" | "TRUE" => true,
            "0" | "0.0" | "false" | "FALSE" => false,
            other => {
                return Err(Error::Csv(format!(
                    "line {line}, column '{}': expected 0 or 1, got '{other}'",
                    headers[ind_col]
                )))
            }
        };
        let outcome = if is_missing(cell(y_col)) {
            if flag || kind == EstimandKind::EffectOnTreated {
                return Err(Error::Csv(format!("line {line}, column '{}': outcome is missing", headers[y_col])));
            }
            f64::NAN
        } else {
            number(y_col)?
        };
        for &c in &cov_cols {
            cov.push(number(c)?);
        }
        y.push(outcome);
        ind.push(flag);
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Csv("no data rows".into()));
    }
    let covariates = DMatrix::from_row_slice(n, cov_cols.len(), &cov);
    Ok(Table {
        dataset: Dataset::new(covariates, ind, y, kind)?,
        covariate_names: cov_cols.iter().map(|&c| headers[c].clone()).collect(),
    })
}

/// Writes a table in the format read by [`ingest_csv`]; values round-trip exactly.
pub fn write_csv(table: &Table, writer: impl Write) -> Result<()> {
    let d = &table.dataset;
    let mut w = csv::Writer::from_writer(writer);
    let ind = match d.kind() {
        EstimandKind::MissingOutcome => "m",
        EstimandKind::EffectOnTreated => "t",
    };
    let mut header = vec!["y".to_string(), ind.to_string()];
    header.extend(table.covariate_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for i in 0..d.n() {
        let y = d.outcome()[i];
        let mut rec = vec![if y.is_nan() { "NA".to_string() } else { y.to_string() }];
        rec.push(if d.indicator()[i] { "1" } else { "0" }.to_string());
        rec.extend(d.covariates().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EstimateOutput<'a> {
    schema_version: u32,
    command: &'static str,
    estimand: Estimand,
    n: usize,
    reports: &'a [EstimateReport],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub schema_version: u32,
    pub command: String,
    pub summary: SimulationSummary,
}

fn propensity_fit(x: &DMatrix<f64>, labels: &[bool]) -> Result<Vec<f64>> {
    Ok(crate::nuisance::fit_logistic(x, labels)?.model.predict(x))
}

fn fit_err(what: &'static str) -> impl Fn(Error) -> CliError {
    move |e| CliError::estimation(what, e)
}

fn point_or_fail(
    est: Estimator,
    q: f64,
    f: impl FnOnce() -> Result<(f64, Option<crate::error::Warning>)>,
) -> std::result::Result<EstimateReport, CliError> {
    let (value, warning) = f().map_err(|e| CliError::estimation(est.name(), e))?;
    Ok(EstimateReport::point(est.name(), q, value, warning))
}

/// Runs the requested estimators at every level.
pub fn cmd_estimate(cfg: &RunConfig, data: &Dataset) -> std::result::Result<Vec<EstimateReport>, CliError> {
    let spec = &cfg.spec;
    let mut reports = Vec::new();
    match (cfg.estimand, data.kind()) {
        (Estimand::Missing, EstimandKind::MissingOutcome) => {
            let e = propensity_fit(data.covariates(), data.indicator()).map_err(fit_err("propensity model"))?;
            let grid = outcome_grid(data, spec.outcome_model, spec.grid_size, spec.seed)
                .map_err(fit_err("outcome model"))?;
            let order = AtomOrder::new(&grid);
            let nuis = NuisancePair::new(Propensity::new(e).map_err(fit_err("propensity model"))?, grid)
                .map_err(fit_err("nuisance"))?;
            for &q in &cfg.q_levels {
                for &est in &cfg.estimators {
                    let report = match est {
                        Estimator::Tmle => tmle_missing_with_order(data, &nuis, &order, q)
                            .and_then(|fit| tmle_report("tmle", data, &nuis.propensity, &fit, Some(&order), q, spec.ci_level))
                            .map_err(fit_err("tmle"))?,
                        Estimator::Aipw => point_or_fail(est, q, || {
                            let r = estimate_aipw_with_order(data, &nuis, &order, q)?;
                            Ok((r.theta, r.warning))
                        })?,
                        Estimator::Ipw => point_or_fail(est, q, || {
                            let r = estimate_ipw(data, &nuis.propensity, q)?;
                            Ok((r.theta, r.warning))
                        })?,
                        Estimator::Firpo => point_or_fail(est, q, || Ok((estimate_firpo(data, &nuis.propensity, q)?, None)))?,
                        Estimator::Od => point_or_fail(est, q, || {
                            Ok((estimate_od_with_order(data, &nuis.conditional, &order, q)?, None))
                        })?,
                    };
                    reports.push(report);
                }
            }
        }
        (Estimand::Effect, EstimandKind::EffectOnTreated) => {
            let e = Propensity::two_sided(
                propensity_fit(data.covariates(), data.indicator()).map_err(fit_err("propensity model"))?,
            )
            .map_err(fit_err("propensity model"))?;
            let treated = data.arm(true).map_err(fit_err("treated arm"))?;
            let control = data.arm(false).map_err(fit_err("control arm"))?;
            let g1 = outcome_grid(&treated, spec.outcome_model, spec.grid_size, spec.seed)
                .map_err(fit_err("treated outcome model"))?;
            let g0 = outcome_grid(&control, spec.outcome_model, spec.grid_size, spec.seed)
                .map_err(fit_err("control outcome model"))?;
            let (o1, o0) = (AtomOrder::new(&g1), AtomOrder::new(&g0));
            let arm1 = NuisancePair::new(e.clone(), g1).map_err(fit_err("nuisance"))?;
            let arm0 = NuisancePair::new(e.complement(), g0).map_err(fit_err("nuisance"))?;
            for &q in &cfg.q_levels {
                for &est in &cfg.estimators {
                    let report = match est {
                        Estimator::Tmle => {
                            let t = tmle_missing_with_order(&treated, &arm1, &o1, q).map_err(fit_err("tmle"))?;
                            let c = tmle_missing_with_order(&control, &arm0, &o0, q).map_err(fit_err("tmle"))?;
                            let fit = EffectFit { effect: t.theta - c.theta, treated: t, control: c };
                            effect_report(data, &fit, &arm1.propensity, &arm0.propensity, (Some(&o1), Some(&o0)), q, spec.ci_level)
                                .map_err(fit_err("tmle"))?
                        }
                        _ => point_or_fail(est, q, || {
                            let one = |d: &Dataset, nuis: &NuisancePair, order: &AtomOrder| -> Result<f64> {
                                Ok(match est {
                                    Estimator::Aipw => estimate_aipw_with_order(d, nuis, order, q)?.theta,
                                    Estimator::Ipw => estimate_ipw(d, &nuis.propensity, q)?.theta,
                                    Estimator::Firpo => estimate_firpo(d, &nuis.propensity, q)?,
                                    _ => estimate_od_with_order(d, &nuis.conditional, order, q)?,
                                })
                            };
                            Ok((one(&treated, &arm1, &o1)? - one(&control, &arm0, &o0)?, None))
                        })?,
                    };
                    reports.push(report);
                }
            }
        }
        (Estimand::Att, EstimandKind::EffectOnTreated) => {
            let e = Propensity::two_sided(
                propensity_fit(data.covariates(), data.indicator()).map_err(fit_err("propensity model"))?,
            )
            .map_err(fit_err("propensity model"))?;
            let control = data.arm(false).map_err(fit_err("control arm"))?;
            let g0 = outcome_grid(&control, spec.outcome_model, spec.grid_size, spec.seed)
                .map_err(fit_err("control outcome model"))?;
            let order = AtomOrder::new(&g0);
            let nuis = NuisancePair::new(e, g0).map_err(fit_err("nuisance"))?;
            for &q in &cfg.q_levels {
                for &est in &cfg.estimators {
                    match est {
                        Estimator::Tmle => {
                            let fit = tmle_att_with_order(data, &nuis, &order, q).map_err(fit_err("tmle"))?;
                            reports.push(
                                tmle_report("tmle", data, &nuis.propensity, &fit, Some(&order), q, spec.ci_level)
                                    .map_err(fit_err("tmle"))?,
                            );
                        }
                        Estimator::Od => reports.push(point_or_fail(est, q, || {
                            Ok((estimate_od_with_order(data, &nuis.conditional, &order, q)?, None))
                        })?),
                        // only the targeted and plug-in estimators target this parameter
                        _ => {}
                    }
                }
            }
        }
        (Estimand::Missing, EstimandKind::EffectOnTreated) => {
            return Err(CliError::input("estimand 'missing' needs an 'm' column"));
        }
        (_, EstimandKind::MissingOutcome) => {
            return Err(CliError::input("effect estimands need a 't' column"));
        }
    }
    Ok(reports)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_estimates(cfg: &RunConfig, n: usize, reports: &[EstimateReport]) -> Result<String> {
    match cfg.format {
        Format::Json => {
            let out = EstimateOutput { schema_version: SCHEMA_VERSION, command: "estimate", estimand: cfg.estimand, n, reports };
            Ok(serde_json::to_string_pretty(&out).map_err(|e| Error::invalid(e.to_string()))? + "\n")
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let header = [
                "estimator", "q", "estimate", "se", "ci_lower", "ci_upper", "p_value", "iterations", "final_epsilon",
                "converged", "warnings",
            ];
            w.write_record(header).map_err(|e| Error::Csv(e.to_string()))?;
            for r in reports {
                let d = r.diagnostics.as_ref();
                let warnings: Vec<String> = r
                    .warnings
                    .iter()
                    .map(|w| serde_json::to_value(w).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
                    .collect();
                w.write_record([
                    r.estimator.clone(),
                    r.q.to_string(),
                    r.estimate.to_string(),
                    opt(r.interval.map(|i| i.se)),
                    opt(r.interval.map(|i| i.lower)),
                    opt(r.interval.map(|i| i.upper)),
                    opt(r.test.map(|t| t.p_value)),
                    d.map(|d| d.iterations.to_string()).unwrap_or_default(),
                    opt(d.map(|d| d.final_epsilon)),
                    d.map(|d| d.converged.to_string()).unwrap_or_default(),
                    warnings.join(";"),
                ])
                .map_err(|e| Error::Csv(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
        }
    }
}

pub fn render_simulation(format: Format, summary: &SimulationSummary) -> Result<String> {
    match format {
        Format::Csv => summary_csv(summary),
        Format::Json => {
            let out = SimulateOutput { schema_version: SCHEMA_VERSION, command: "simulate".into(), summary: summary.clone() };
            Ok(serde_json::to_string_pretty(&out).map_err(|e| Error::invalid(e.to_string()))? + "\n")
        }
    }
}

/// Table with one block of RMSE, bias and SD columns per scenario and one
/// row per estimator, for each level.
pub fn render_table(summary: &SimulationSummary) -> String {
    let spec = &summary.spec;
    let mut out = String::new();
    for &q in &spec.q_levels {
        let _ = writeln!(out, "n = {}, q = {}, reps = {}", spec.n, q, spec.reps);
        let _ = write!(out, "{:<8}", "");
        for s in &spec.scenarios {
            let _ = write!(out, "| ({s}) {:<19}", "RMSE   Bias     SD");
        }
        out.push('\n');
        for est in Estimator::ALL {
            let _ = write!(out, "{:<8}", est.name());
            for &s in &spec.scenarios {
                match summary.row(s, q, est) {
                    Some(r) => {
                        let _ = write!(out, "| {:>6.2} {:>6.2} {:>6.2}  ", r.rmse, r.bias, r.sd);
                    }
                    None => {
                        let _ = write!(out, "| {:<22}", "");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "targeting runs: {}, converged: {}, score within bound: {}, monotone likelihood: {}",
            summary.audit.runs, summary.audit.converged, summary.audit.score_ok, summary.audit.monotone
        );
    }
    out
}

fn emit(output: Option<&Path>, text: &str) -> std::result::Result<(), CliError> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::input(format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(CliError::input)
        }
    }
}

/// Runs a parsed command line and returns the exit code.
pub fn run(cli: Cli) -> std::result::Result<i32, CliError> {
    match cli.command {
        Command::Estimate(args) => {
            let file = load_config(args.config.as_deref())?;
            let cfg = RunConfig::for_estimate(&args, &file).map_err(CliError::input)?;
            let table = ingest_csv(cfg.input.as_deref().expect("validated")).map_err(CliError::input)?;
            let reports = cmd_estimate(&cfg, &table.dataset)?;
            let text = render_estimates(&cfg, table.dataset.n(), &reports).map_err(CliError::input)?;
            emit(cfg.output.as_deref(), &text)?;
            Ok(exit::SUCCESS)
        }
        Command::Simulate(args) => {
            let file = load_config(args.config.as_deref())?;
            let cfg = RunConfig::for_simulate(&args, &file).map_err(CliError::input)?;
            let summary = run_monte_carlo(&cfg.spec).map_err(|e| CliError::estimation("simulation", e))?;
            let text = render_simulation(cfg.format, &summary).map_err(CliError::input)?;
            emit(cfg.output.as_deref(), &text)?;
            if summary.failure_fraction() > MAX_FAILED_SHARE {
                eprintln!(
                    "{} of {} replications had failed estimators",
                    summary.failed_replications, cfg.spec.reps
                );
                return Ok(exit::PARTIAL_FAILURE);
            }
            Ok(exit::SUCCESS)
        }
        Command::Report(args) => {
            let text = std::fs::read_to_string(&args.input)
                .map_err(|e| CliError::input(format!("{}: {e}", args.input.display())))?;
            let parsed: SimulateOutput = serde_json::from_str(&text).map_err(CliError::input)?;
            if parsed.schema_version != SCHEMA_VERSION {
                return Err(CliError::input(format!("unsupported schema version {}", parsed.schema_version)));
            }
            emit(args.output.as_deref(), &render_table(&parsed.summary))?;
            Ok(exit::SUCCESS)
        }
    }
}
