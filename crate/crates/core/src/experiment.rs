//! Experiment drivers: CSV export, parameter sweeps, generator analysis over an
//! ensemble and the full reference reproduction with its acceptance summary.
//!
//! CSV layouts (column order is stable):
//!
//! * trajectory: `t,x_1..x_n,xbar_1..xbar_m,xi_1..xi_m,rho_1..rho_m`
//! * ensemble: `t,mean_sq_xbar,ci_halfwidth,mean_abs_xbar_1..mean_abs_xbar_m,breach_count`
//! * sweep: [`SWEEP_HEADER`]
//! * analysis: `t,V_mean,V_bound,LV_violations,beta_mean`
//! * conditions: `name,mode,margin,pass`

use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::analysis::{
    self, barbalat_along, decay_along, time_below, violation_flags, BarbalatPath, BarbalatReport, DecayPath,
    DecayReport, LyapunovSpec, BETA_TOLERANCE,
};
use crate::conditions::{self, ConditionReport, GammaGrid, TrajectoryMargins, TRAJECTORY_TOLERANCE};
use crate::config::ExperimentConfig;
use crate::control::Controller;
use crate::dynamics::{DiffusionFunction, DiffusionKind, NoiseMode, SystemModel};
use crate::graph::Graph;
use crate::linalg::CompensatedSum;
use crate::ppc::{PerformanceFunction, PpcBank};
use crate::sim::{
    map_realizations, run_ensemble, run_one, EnsembleStats, PathSummary, Scheme, SimConfig, SimError,
    TrajectoryRecord,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid sweep value {value} for {param}: {reason}")]
    SweepValue { param: SweepParam, value: f64, reason: String },
    #[error("analysis needs controller thm1 or thm2, got {0}")]
    NeedsPpcController(Controller),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn numbered(prefix: &str, count: usize) -> String {
    join((1..=count).map(|k| format!("{prefix}_{k}")))
}

pub fn trajectory_header(n: usize, m: usize) -> String {
    let mut cols = vec!["t".to_string(), numbered("x", n)];
    if m > 0 {
        cols.extend([numbered("xbar", m), numbered("xi", m), numbered("rho", m)]);
    }
    cols.join(",")
}

pub fn trajectory_csv(model: &SystemModel, record: &TrajectoryRecord) -> String {
    let mut out = trajectory_header(record.agents(), record.edges());
    out.push('\n');
    for s in 0..record.len() {
        let t = record.times[s];
        let rho = model.ppc().rho_all(t);
        let row = std::iter::once(&t)
            .chain(record.x(s))
            .chain(record.xbar(s))
            .chain(record.xi(s))
            .chain(rho.iter());
        out.push_str(&join(row));
        out.push('\n');
    }
    out
}

pub fn ensemble_header(m: usize) -> String {
    let mut cols = vec!["t".to_string(), "mean_sq_xbar".into(), "ci_halfwidth".into()];
    if m > 0 {
        cols.push(numbered("mean_abs_xbar", m));
    }
    cols.push("breach_count".into());
    cols.join(",")
}

pub fn ensemble_csv(stats: &EnsembleStats) -> String {
    let mut out = ensemble_header(stats.edges);
    out.push('\n');
    for s in 0..stats.times.len() {
        let mut row = vec![stats.times[s].to_string(), stats.mean_sq[s].to_string(), stats.ci_half_width[s].to_string()];
        row.extend(stats.mean_abs_at(s).iter().map(f64::to_string));
        row.push(stats.breaches_by_sample[s].to_string());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Envelope decay rate of every edge.
    Eps,
    /// Multiplier on the diffusion function (and its Lipschitz constant).
    KgScale,
    /// Step size; the recording interval is kept as close as possible.
    Dt,
    /// Number of realizations.
    Realizations,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Eps => "eps",
            Self::KgScale => "k_g-scale",
            Self::Dt => "dt",
            Self::Realizations => "N",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::Eps, Self::KgScale, Self::Dt, Self::Realizations]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown sweep parameter `{s}` (expected eps, k_g-scale, dt or N)"))
    }
}

/// Model and simulation settings of `config` with `param` set to `value`.
pub fn apply_sweep(config: &ExperimentConfig, param: SweepParam, value: f64) -> Result<(SystemModel, SimConfig), ExperimentError> {
    let bad = |reason: &str| ExperimentError::SweepValue { param, value, reason: reason.into() };
    let mut config = config.clone();
    let mut scale = 1.0;
    match param {
        SweepParam::Eps => {
            if !(value > 0.0 && value.is_finite()) {
                return Err(bad("must be positive"));
            }
            config.ppc_default.eps = Some(value);
            for p in config.ppc_edges.values_mut() {
                p.eps = None;
            }
        }
        SweepParam::KgScale => {
            if !value.is_finite() {
                return Err(bad("must be finite"));
            }
            scale = value;
        }
        SweepParam::Dt => {
            if !(value > 0.0 && value <= config.horizon) {
                return Err(bad("must be in (0, horizon]"));
            }
            let interval = config.dt * config.sample_every as f64;
            config.sample_every = ((interval / value).round() as usize).max(1);
            config.dt = value;
        }
        SweepParam::Realizations => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(bad("must be a positive integer"));
            }
            config.realizations = value as usize;
        }
    }
    let base = config.model();
    let model = SystemModel::new(
        base.graph().clone(),
        base.diffusion().scaled(scale),
        base.noise_mode(),
        base.ppc().clone(),
    )
    .expect("sizes agree");
    let cfg = config.sim_config();
    cfg.validate(&model, config.controller)?;
    Ok((model, cfg))
}

/// Final metrics of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub final_mean_sq: f64,
    pub final_ci: f64,
    pub decay_rate: f64,
    /// First sample time with `E‖xbar‖²` below the threshold, and the same for the
    /// lower and upper CI edges; `NaN` if never.
    pub time_below: [f64; 3],
    pub as_fraction: f64,
    pub final_fraction: f64,
    pub breaches: usize,
    pub solver_failures: usize,
}

pub const SWEEP_HEADER: &str =
    "value,final_mean_sq,final_ci_halfwidth,decay_rate,t_below,t_below_lo,t_below_hi,as_fraction,final_fraction,breaches,solver_failures";

impl SweepRow {
    pub fn from_stats(value: f64, stats: &EnsembleStats, model: &SystemModel, delta: f64, threshold: f64) -> Self {
        let metrics = analysis::consensus_metrics(stats, model, delta, 2);
        let last = stats.times.len() - 1;
        let crossing = time_below(stats, threshold);
        Self {
            value,
            final_mean_sq: metrics.final_mean_sq,
            final_ci: stats.ci_half_width[last],
            decay_rate: metrics.decay_rate,
            time_below: crossing.map_or([f64::NAN; 3], |c| [c.estimate, c.earliest, c.latest]),
            as_fraction: metrics.as_fraction,
            final_fraction: metrics.final_fraction,
            breaches: stats.breaches,
            solver_failures: stats.solver_failures,
        }
    }

    pub fn to_csv_row(&self) -> String {
        let [t, lo, hi] = self.time_below;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.value,
            self.final_mean_sq,
            self.final_ci,
            self.decay_rate,
            t,
            lo,
            hi,
            self.as_fraction,
            self.final_fraction,
            self.breaches,
            self.solver_failures
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: SweepParam,
    /// `E‖xbar‖²` level used for the crossing times.
    pub threshold: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }

    pub fn breaches(&self) -> usize {
        self.rows.iter().map(|r| r.breaches).sum()
    }
}

/// One ensemble per value, controller and everything else from `config`.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64], threshold: f64) -> Result<SweepTable, ExperimentError> {
    let delta = config.delta();
    let rows = values
        .iter()
        .map(|&value| {
            let (model, cfg) = apply_sweep(config, param, value)?;
            let stats = run_ensemble(&model, config.controller, &cfg);
            Ok(SweepRow::from_stats(value, &stats, &model, delta, threshold))
        })
        .collect::<Result<_, ExperimentError>>()?;
    Ok(SweepTable { param, threshold, rows })
}

/// Generator analysis of one ensemble, aligned with the sample times.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisTable {
    pub controller: Controller,
    pub times: Vec<f64>,
    pub v_mean: Vec<f64>,
    /// Comparison bound on `E V` (mean-square law only).
    pub v_bound: Option<Vec<f64>>,
    /// Samples where the generator inequality fails, per sample time.
    pub violations: Vec<usize>,
    pub beta_mean: Vec<f64>,
    pub min_beta: f64,
    /// Envelope check on the ensemble means (mean-square law only).
    pub envelope_ok: Option<bool>,
    pub breaches: usize,
}

impl AnalysisTable {
    pub fn total_violations(&self) -> usize {
        self.violations.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,V_mean,V_bound,LV_violations,beta_mean\n");
        for s in 0..self.times.len() {
            let bound = self.v_bound.as_ref().map_or(String::new(), |b| b[s].to_string());
            let _ = writeln!(out, "{},{},{},{},{}", self.times[s], self.v_mean[s], bound, self.violations[s], self.beta_mean[s]);
        }
        out
    }
}

struct AnalyzedPath {
    summary: PathSummary,
    decay: Option<(DecayPath, Vec<bool>)>,
    barbalat: BarbalatPath,
    /// Samples with `LV > 1e-6` for the almost-sure function.
    positive: Vec<bool>,
}

fn analyze_path(model: &SystemModel, record: &TrajectoryRecord, controller: Controller, gamma: f64, kappa: f64, q: u32, horizon: f64) -> AnalyzedPath {
    let summary = PathSummary::from_record(record, horizon);
    let barbalat = barbalat_along(model, record, q);
    if controller == Controller::MeanSquare {
        let decay = decay_along(model, record, controller, gamma, kappa);
        let flags = violation_flags(model, record, controller, gamma, kappa);
        return AnalyzedPath { summary, decay: Some((decay, flags)), barbalat, positive: vec![] };
    }
    let spec = LyapunovSpec::AlmostSure { q };
    let positive = (0..record.len())
        .map(|s| {
            let state = record.state(model, s);
            analysis::generator_value(&spec, model, &state, controller).is_ok_and(|lv| lv > BETA_TOLERANCE)
        })
        .collect();
    AnalyzedPath { summary, decay: None, barbalat, positive }
}

fn per_sample_counts(samples: usize, flags: impl Iterator<Item = Vec<bool>>) -> Vec<usize> {
    let mut counts = vec![0; samples];
    for f in flags {
        for (c, v) in counts.iter_mut().zip(f) {
            *c += usize::from(v);
        }
    }
    counts
}

/// Mean-square law: pointwise `LV ≤ -κ V` and the comparison envelope.
/// Almost-sure law: `LV ≤ 0` and `β ≥ 0` with `V = (‖eta‖²/q)^{q/2}`.
pub fn analyze(model: &SystemModel, controller: Controller, cfg: &SimConfig, gamma: f64, kappa: f64, q: u32) -> Result<AnalysisTable, ExperimentError> {
    if !controller.uses_envelope() {
        return Err(ExperimentError::NeedsPpcController(controller));
    }
    cfg.validate(model, controller)?;
    let paths = map_realizations(model, controller, cfg, |r| analyze_path(model, &r, controller, gamma, kappa, q, cfg.horizon));
    Ok(analysis_table(model, controller, cfg, gamma, kappa, &paths))
}

fn analysis_table(model: &SystemModel, controller: Controller, cfg: &SimConfig, gamma: f64, kappa: f64, paths: &[AnalyzedPath]) -> AnalysisTable {
    let times = cfg.sample_times();
    let barbalat: Vec<BarbalatPath> = paths.iter().map(|p| p.barbalat.clone()).collect();
    let bar = BarbalatReport::from_paths(times.clone(), &barbalat);
    let breaches = paths.iter().filter(|p| matches!(p.summary.status, crate::sim::Termination::EnvelopeBreach(_))).count();
    if controller == Controller::MeanSquare {
        let decay: Vec<DecayPath> = paths.iter().map(|p| p.decay.as_ref().expect("mean-square path").0.clone()).collect();
        let flags: Vec<Vec<bool>> = paths.iter().map(|p| p.decay.as_ref().expect("mean-square path").1.clone()).collect();
        let report = DecayReport::from_paths(times.clone(), gamma, kappa, model.edges(), &decay, &flags);
        AnalysisTable {
            controller,
            violations: report.violations_by_sample.clone(),
            v_mean: report.v_mean.clone(),
            v_bound: Some(report.v_bound.clone()),
            envelope_ok: Some(report.envelope_ok()),
            times,
            beta_mean: bar.beta_mean,
            min_beta: bar.min_beta,
            breaches,
        }
    } else {
        AnalysisTable {
            controller,
            violations: per_sample_counts(times.len(), paths.iter().map(|p| p.positive.clone())),
            times,
            v_mean: bar.v_mean,
            v_bound: None,
            beta_mean: bar.beta_mean,
            min_beta: bar.min_beta,
            envelope_ok: None,
            breaches,
        }
    }
}

/// Worst-case report of `config`, optionally followed by trajectory-mode minima.
pub fn verify(config: &ExperimentConfig, trajectory_minima: Option<TrajectoryMargins>) -> ConditionReport {
    let model = config.model();
    let mut report = conditions::worst_case_report(
        model.graph(),
        model.ppc(),
        config.analysis.gamma,
        config.analysis.kappa,
        model.diffusion().lipschitz(),
    );
    if let Some(m) = trajectory_minima {
        report.entries.extend(m.entries());
    }
    report
}

/// Minimum trajectory-mode margins over all completed paths of the configured ensemble.
pub fn trajectory_minima(config: &ExperimentConfig) -> Result<TrajectoryMargins, ExperimentError> {
    let model = config.model();
    let cfg = config.sim_config();
    cfg.validate(&model, config.controller)?;
    let (g, k) = (config.analysis.gamma, config.analysis.kappa);
    let (kg, eps_bar) = (model.diffusion().lipschitz(), model.ppc().eps_bar());
    let per_path = map_realizations(&model, config.controller, &cfg, |r| {
        r.completed()
            .then(|| conditions::trajectory_margins(model.graph(), &r, g, k, kg, eps_bar))
    });
    Ok(per_path.into_iter().flatten().fold(TrajectoryMargins::EMPTY, TrajectoryMargins::min))
}

/// The four reference runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub name: &'static str,
    pub controller: Controller,
    pub eps: f64,
}

pub const SCENARIOS: [Scenario; 4] = [
    Scenario { name: "uncontrolled", controller: Controller::None, eps: 1.5 },
    Scenario { name: "almost-sure", controller: Controller::AlmostSure, eps: 1.5 },
    Scenario { name: "mean-square", controller: Controller::MeanSquare, eps: 1.5 },
    Scenario { name: "mean-square-fast", controller: Controller::MeanSquare, eps: 10.0 },
];

#[derive(Debug, Clone)]
pub struct ReproduceOptions {
    /// Overrides the config's realization count.
    pub realizations: Option<usize>,
    pub seed: Option<u64>,
    /// Number of realizations exported as trajectory CSVs per scenario.
    pub trajectories: usize,
    pub gnuplot: bool,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        Self { realizations: None, seed: None, trajectories: 3, gnuplot: true }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub model: SystemModel,
    pub stats: EnsembleStats,
    pub analysis: Option<AnalysisTable>,
    /// Decay report for the mean-square law.
    pub decay: Option<DecayReport>,
    pub margins: TrajectoryMargins,
    pub sign_ok: bool,
    pub records: Vec<TrajectoryRecord>,
}

struct ScenarioPath {
    analyzed: Option<AnalyzedPath>,
    summary: PathSummary,
    margins: Option<TrajectoryMargins>,
    sign_ok: bool,
    record: Option<TrajectoryRecord>,
}

fn run_scenario(config: &ExperimentConfig, scenario: Scenario, cfg: &SimConfig, keep: usize) -> Result<ScenarioRun, ExperimentError> {
    let (model, _) = apply_sweep(config, SweepParam::Eps, scenario.eps)?;
    let c = scenario.controller;
    cfg.validate(&model, c)?;
    let (gamma, kappa, q) = (config.analysis.gamma, config.analysis.kappa, config.analysis.q);
    let (kg, eps_bar) = (model.diffusion().lipschitz(), model.ppc().eps_bar());
    let paths = map_realizations(&model, c, cfg, |r| {
        let analyzed = c.uses_envelope().then(|| analyze_path(&model, &r, c, gamma, kappa, q, cfg.horizon));
        ScenarioPath {
            summary: analyzed.as_ref().map_or_else(|| PathSummary::from_record(&r, cfg.horizon), |a| a.summary.clone()),
            analyzed,
            margins: (c.uses_envelope() && r.completed())
                .then(|| conditions::trajectory_margins(model.graph(), &r, gamma, kappa, kg, eps_bar)),
            sign_ok: analysis::sign_property_holds(&r),
            record: ((r.realization as usize) < keep).then_some(r),
        }
    });
    let summaries: Vec<PathSummary> = paths.iter().map(|p| p.summary.clone()).collect();
    let stats = EnsembleStats::from_summaries(cfg.sample_times(), model.edges(), &summaries);
    let margins = paths.iter().filter_map(|p| p.margins).fold(TrajectoryMargins::EMPTY, TrajectoryMargins::min);
    let sign_ok = paths.iter().all(|p| p.sign_ok);
    let (analysis, decay) = if c.uses_envelope() {
        let analyzed: Vec<AnalyzedPath> = paths.iter().map(|p| clone_analyzed(p.analyzed.as_ref().unwrap())).collect();
        let decay = (c == Controller::MeanSquare).then(|| {
            let d: Vec<DecayPath> = analyzed.iter().map(|a| a.decay.as_ref().unwrap().0.clone()).collect();
            let f: Vec<Vec<bool>> = analyzed.iter().map(|a| a.decay.as_ref().unwrap().1.clone()).collect();
            DecayReport::from_paths(cfg.sample_times(), gamma, kappa, model.edges(), &d, &f)
        });
        (Some(analysis_table(&model, c, cfg, gamma, kappa, &analyzed)), decay)
    } else {
        (None, None)
    };
    let records = paths.into_iter().filter_map(|p| p.record).collect();
    Ok(ScenarioRun { scenario, model, stats, analysis, decay, margins, sign_ok, records })
}

fn clone_analyzed(a: &AnalyzedPath) -> AnalyzedPath {
    AnalyzedPath { summary: a.summary.clone(), decay: a.decay.clone(), barbalat: a.barbalat.clone(), positive: a.positive.clone() }
}

/// Outcome of one acceptance criterion; `pass` is `None` when it is not evaluated here.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOutcome {
    pub id: &'static str,
    pub title: &'static str,
    pub pass: Option<bool>,
    pub detail: String,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        write!(f, "{tag} {} {}: {}", self.id, self.title, self.detail)
    }
}

/// Numbers behind the integrator criteria.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorChecks {
    /// Max deviation from the noiseless two-agent closed form at dt = 1e-3.
    pub closed_form_error: f64,
    /// Sample variance of a pure Brownian agent at t = 1.
    pub brownian_variance: f64,
    /// Error ratios for dt halving 4e-3 -> 2e-3 -> 1e-3.
    pub order_ratios: [f64; 2],
}

impl IntegratorChecks {
    pub fn pass(&self) -> bool {
        self.closed_form_error <= 5e-3
            && (self.brownian_variance - 1.0).abs() <= 0.03
            && self.order_ratios.iter().all(|r| (r - 2.0).abs() <= 0.3)
    }
}

fn closed_form_error(scheme: Scheme, dt: f64) -> f64 {
    let pf = PerformanceFunction::new(5.0, 0.1, 1.5).expect("valid envelope");
    let model = SystemModel::new(Graph::path(2).expect("path"), DiffusionFunction::zero(), NoiseMode::Shared, PpcBank::uniform(pf, 1))
        .expect("sizes agree");
    let cfg = SimConfig { dt, horizon: 3.0, sample_every: 1, scheme, ..SimConfig::new(nalgebra::DVector::from_column_slice(&[1.0, -1.0])) };
    let rec = run_one(&model, Controller::None, &cfg, 0);
    (0..rec.len()).map(|s| (rec.xbar(s)[0] - 2.0 * (-2.0 * rec.times[s]).exp()).abs()).fold(0.0, f64::max)
}

/// Closed-form, variance and step-halving checks of the configured scheme.
pub fn integrator_checks(scheme: Scheme, seed: u64) -> IntegratorChecks {
    let errors = [4e-3, 2e-3, 1e-3].map(|dt| closed_form_error(scheme, dt));
    let noise = DiffusionFunction::new(DiffusionKind::Constant { sigma: 1.0 }).expect("constant diffusion");
    let model = SystemModel::new(Graph::new(2, &[]).expect("edgeless pair"), noise, NoiseMode::Shared, PpcBank::new(vec![]))
        .expect("sizes agree");
    let cfg = SimConfig { dt: 1e-2, horizon: 1.0, seed, sample_every: 100, realizations: 10_000, scheme, ..SimConfig::new(nalgebra::DVector::zeros(2)) };
    let finals = map_realizations(&model, Controller::None, &cfg, |r| r.x(r.len() - 1)[0]);
    let n = finals.len() as f64;
    let mean = finals.iter().copied().collect::<CompensatedSum>().value() / n;
    let var = finals.iter().map(|v| (v - mean).powi(2)).collect::<CompensatedSum>().value() / (n - 1.0);
    IntegratorChecks {
        closed_form_error: errors[2],
        brownian_variance: var,
        order_ratios: [errors[0] / errors[1], errors[1] / errors[2]],
    }
}

#[derive(Debug, Clone)]
pub struct Reproduction {
    pub runs: Vec<ScenarioRun>,
    pub conditions: ConditionReport,
    pub search: Option<conditions::SearchOutcome>,
    pub integrator: IntegratorChecks,
    pub criteria: Vec<CriterionOutcome>,
    pub delta: f64,
}

impl Reproduction {
    pub fn run(&self, name: &str) -> &ScenarioRun {
        self.runs.iter().find(|r| r.scenario.name == name).expect("known scenario")
    }

    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass != Some(false))
    }

    pub fn failed(&self) -> Vec<&CriterionOutcome> {
        self.criteria.iter().filter(|c| c.pass == Some(false)).collect()
    }

    pub fn summary(&self) -> String {
        let mut out = String::from("reference reproduction\n\n");
        for run in &self.runs {
            let s = &run.stats;
            let last = s.times.len() - 1;
            let _ = writeln!(
                out,
                "{:<17} controller={} eps={} N={} breaches={} solver_failures={} E|xbar(T)|^2={:.4e} frac(max|xbar(T)|<{})={:.4}",
                run.scenario.name,
                run.scenario.controller,
                run.scenario.eps,
                s.realizations,
                s.breaches,
                s.solver_failures,
                s.mean_sq[last],
                self.delta,
                s.final_fraction_below(self.delta)
            );
        }
        out.push_str("\nconditions (name mode margin status)\n");
        for e in &self.conditions.entries {
            let _ = writeln!(out, "{e}");
        }
        match &self.search {
            Some(s) => {
                let _ = writeln!(out, "largest worst-case kappa on the gamma grid: gamma={:.4} kappa={:.4}", s.gamma, s.kappa);
            }
            None => out.push_str("no (gamma, kappa) on the grid passes the worst-case checks\n"),
        }
        out.push_str("\ncriteria\n");
        for c in &self.criteria {
            let _ = writeln!(out, "{c}");
        }
        out
    }

    pub fn gnuplot_script(&self) -> String {
        let mut out = String::from("set datafile separator ','\nset key autotitle columnhead\nset logscale y\nset xlabel 't'\n");
        out.push_str("set ylabel 'E|xbar|^2'\nset terminal pngcairo size 900,600\nset output 'mean_sq.png'\nplot ");
        let plots: Vec<String> = self.runs.iter().map(|r| format!("'{}/ensemble.csv' using 1:2 with lines title '{}'", r.scenario.name, r.scenario.name)).collect();
        out.push_str(&plots.join(", \\\n     "));
        out.push_str("\nunset logscale y\nset ylabel 'xbar'\n");
        for r in &self.runs {
            if r.records.is_empty() {
                continue;
            }
            let m = r.model.edges();
            let _ = writeln!(out, "set output '{}_trajectory.png'", r.scenario.name);
            let cols: Vec<String> = (0..m)
                .flat_map(|k| {
                    let n = r.model.agents();
                    [
                        format!("'{}/trajectory_0.csv' using 1:{} with lines title 'xbar_{}'", r.scenario.name, 2 + n + k, k + 1),
                        format!("'' using 1:{} with lines dt 2 lc rgb 'grey' notitle", 2 + n + 3 * m - m + k),
                        format!("'' using 1:(-${}) with lines dt 2 lc rgb 'grey' notitle", 2 + n + 3 * m - m + k),
                    ]
                })
                .collect();
            let _ = writeln!(out, "plot {}", cols.join(", \\\n     "));
        }
        out
    }

    /// Writes every artifact below `dir`.
    pub fn write(&self, dir: &Path, gnuplot: bool) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for run in &self.runs {
            let sub = dir.join(run.scenario.name);
            fs::create_dir_all(&sub)?;
            fs::write(sub.join("ensemble.csv"), ensemble_csv(&run.stats))?;
            for rec in &run.records {
                fs::write(sub.join(format!("trajectory_{}.csv", rec.realization)), trajectory_csv(&run.model, rec))?;
            }
            if let Some(a) = &run.analysis {
                fs::write(sub.join("analysis.csv"), a.to_csv())?;
            }
        }
        fs::write(dir.join("conditions.csv"), self.conditions.to_csv())?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        if gnuplot {
            fs::write(dir.join("plot.gp"), self.gnuplot_script())?;
        }
        Ok(())
    }
}

/// Runs the four reference scenarios, the condition report and the integrator
/// checks, and grades every acceptance criterion.
///
/// The base config supplies graph, noise, envelopes, initial state and
/// simulation settings; each scenario overrides controller and `eps`.
pub fn reproduce(config: &ExperimentConfig, options: &ReproduceOptions) -> Result<Reproduction, ExperimentError> {
    let mut cfg = config.sim_config();
    if let Some(n) = options.realizations {
        cfg.realizations = n;
    }
    if let Some(seed) = options.seed {
        cfg.seed = seed;
    }
    let runs = SCENARIOS
        .iter()
        .map(|&s| run_scenario(config, s, &cfg, options.trajectories))
        .collect::<Result<Vec<_>, _>>()?;
    let delta = config.delta();
    let reference = &runs[2];
    let model = &reference.model;
    let k_g = model.diffusion().lipschitz();
    let (gamma, kappa) = (config.analysis.gamma, config.analysis.kappa);
    let mut conditions = conditions::worst_case_report(model.graph(), model.ppc(), gamma, kappa, k_g);
    conditions.entries.extend(reference.margins.entries());
    let search = conditions::search_gamma_kappa(model.graph(), model.ppc(), k_g, GammaGrid::default());
    let integrator = integrator_checks(cfg.scheme, cfg.seed);

    let mut criteria = Vec::new();
    let envelope_sum = |t: f64| model.ppc().rho_all(t).iter().map(|r| r * r).sum::<f64>();
    {
        let s = &reference.stats;
        let last = s.times.len() - 1;
        let below = (0..s.times.len()).all(|i| s.mean_sq[i] < envelope_sum(s.times[i]));
        let target = 5.0 * 0.12f64.powi(2);
        criteria.push(CriterionOutcome {
            id: "1",
            title: "mean-square reference ensemble",
            pass: Some(below && s.breaches == 0 && s.solver_failures == 0 && s.mean_sq[last] < target),
            detail: format!(
                "E|xbar|^2 below sum rho^2 at all samples: {below}; breaches {}; solver failures {}; E|xbar(T)|^2 = {:.4e} (target < {target})",
                s.breaches, s.solver_failures, s.mean_sq[last]
            ),
        });
    }
    {
        let s = &runs[1].stats;
        let frac = s.final_fraction_below(delta);
        criteria.push(CriterionOutcome {
            id: "2",
            title: "almost-sure proxy",
            pass: Some(frac >= 0.99 && s.breaches == 0),
            detail: format!("fraction max|xbar(T)| < {delta}: {frac:.4} (need >= 0.99); breaches {}", s.breaches),
        });
    }
    {
        let a = conditions::check_almost_sure(model.graph(), k_g);
        let static_ok = a.pass() && (a.margin - 0.5).abs() < 1e-12;
        let m = reference.margins;
        let traj_ok = m.min_all() >= -TRAJECTORY_TOLERANCE;
        criteria.push(CriterionOutcome {
            id: "3",
            title: "condition checks",
            pass: Some(static_ok && traj_ok),
            detail: format!(
                "almost-sure margin {:.12}; trajectory minima over completed paths: envelope-decay {:.4}, convergence-rate {:.4}, noise-robustness {:.4}",
                a.margin, m.envelope_decay, m.convergence_rate, m.noise_robustness
            ),
        });
    }
    {
        let d = reference.decay.as_ref().expect("mean-square run");
        criteria.push(CriterionOutcome {
            id: "4",
            title: "generator inequality",
            pass: Some(d.pointwise_ok() && d.envelope_ok()),
            detail: format!(
                "pointwise violations {}/{} (worst LV + kappa V = {:.3e}); ensemble within comparison envelope: {}",
                d.violations,
                d.samples,
                d.worst_excess,
                d.envelope_ok()
            ),
        });
    }
    {
        let s = &runs[0].stats;
        criteria.push(CriterionOutcome {
            id: "5",
            title: "uncontrolled contrast",
            pass: Some(s.breaches >= 1),
            detail: format!("{} of {} uncontrolled paths leave the envelope", s.breaches, s.realizations),
        });
    }
    criteria.push(CriterionOutcome {
        id: "6",
        title: "integrator validation",
        pass: Some(integrator.pass()),
        detail: format!(
            "closed-form error {:.3e} (<= 5e-3); Brownian variance {:.4} (1 +- 0.03); error ratios {:.3}, {:.3} (2 +- 0.3)",
            integrator.closed_form_error, integrator.brownian_variance, integrator.order_ratios[0], integrator.order_ratios[1]
        ),
    });
    criteria.push(CriterionOutcome {
        id: "7",
        title: "property suites",
        pass: None,
        detail: format!(
            "covered by the test suite; xi*xbar >= 0 on every recorded sample here: {}",
            runs.iter().all(|r| r.sign_ok)
        ),
    });
    {
        let slow = time_below(&runs[2].stats, 0.5);
        let fast = time_below(&runs[3].stats, 0.5);
        let pass = matches!((slow, fast), (Some(s), Some(f)) if f.latest < s.earliest);
        let show = |c: Option<analysis::CrossingTime>| {
            c.map_or("never".to_string(), |c| format!("{:.3} [{:.3}, {:.3}]", c.estimate, c.earliest, c.latest))
        };
        criteria.push(CriterionOutcome {
            id: "8",
            title: "decay-rate ordering",
            pass: Some(pass),
            detail: format!("time to E|xbar|^2 < 0.5: eps=1.5 {}, eps=10 {}", show(slow), show(fast)),
        });
    }
    Ok(Reproduction { runs, conditions, search, integrator, criteria, delta })
}
