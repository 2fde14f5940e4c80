//! Fixed-step integration of the closed loop and Monte Carlo ensembles.
//!
//! The state is integrated in node space; relative positions, transformed errors
//! and `phi` are derived from `x` at every recorded sample, so `xbar = Dᵀ x` holds
//! exactly in every record.
//!
//! Two schemes are available. [`step`] is the explicit Euler–Maruyama update.
//! [`Scheme::DriftImplicit`] (the default) treats the drift implicitly and the
//! noise explicitly, `y = x + G(x) ΔW + dt f(y, t + dt)`, solved by a damped Newton
//! iteration that never leaves the envelopes. The closed loop gains grow like
//! `phi²`, which makes the explicit update unstable at practical step sizes.
//!
//! Realization `r` draws its noise from `ChaCha8Rng::seed_from_u64(seed)` on stream
//! `r`, so results do not depend on how realizations are scheduled.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::control::{apply_incidence, Controller};
use crate::dynamics::{AugmentedState, SystemModel};
use crate::linalg::CompensatedSum;
use crate::ppc::{EnvelopeBreach, BREACH_TOLERANCE};

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("initial state is outside the envelopes: {0}")]
    InfeasibleStart(EnvelopeBreach),
    #[error("controller {0} needs a tree graph")]
    NeedsTree(Controller),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    Explicit,
    #[default]
    DriftImplicit,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::Explicit => "explicit",
            Self::DriftImplicit => "implicit",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explicit" => Ok(Self::Explicit),
            "implicit" => Ok(Self::DriftImplicit),
            other => Err(format!("unknown scheme `{other}` (expected explicit or implicit)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Record every `sample_every`-th step (the final step is always recorded).
    pub sample_every: usize,
    pub realizations: usize,
    pub x0: DVector<f64>,
    pub scheme: Scheme,
}

impl SimConfig {
    pub fn new(x0: DVector<f64>) -> Self {
        Self { dt: 1e-3, horizon: 5.0, seed: 0, sample_every: 10, realizations: 1, x0, scheme: Scheme::default() }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Times of the recorded samples of a path that runs to the horizon.
    pub fn sample_times(&self) -> Vec<f64> {
        sample_steps(self.steps(), self.sample_every).map(|k| k as f64 * self.dt).collect()
    }

    pub fn validate(&self, model: &SystemModel, controller: Controller) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return bad(format!("horizon {} must be at least dt {}", self.horizon, self.dt));
        }
        if self.sample_every == 0 {
            return bad("sample_every must be at least 1".into());
        }
        if self.realizations == 0 {
            return bad("realizations must be at least 1".into());
        }
        if self.x0.len() != model.agents() {
            return bad(format!("x0 has {} entries, graph has {} agents", self.x0.len(), model.agents()));
        }
        if controller.uses_envelope() {
            if !model.graph().is_tree() {
                return Err(SimError::NeedsTree(controller));
            }
            let xbar = model.graph().relative_positions(&self.x0);
            if let Some(b) = model.ppc().first_breach(xbar.as_slice(), 0.0) {
                return Err(SimError::InfeasibleStart(b));
            }
        }
        Ok(())
    }
}

fn sample_steps(steps: usize, every: usize) -> impl Iterator<Item = usize> {
    (0..=steps).filter(move |&k| k % every == 0 || k == steps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    Completed,
    EnvelopeBreach(EnvelopeBreach),
    /// The implicit solve did not converge at time `t`.
    SolverFailure { t: f64 },
}

/// Recorded samples of one realization, stored row-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub realization: u64,
    pub times: Vec<f64>,
    pub status: Termination,
    n: usize,
    m: usize,
    x: Vec<f64>,
    xbar: Vec<f64>,
    xi: Vec<f64>,
    phi: Vec<f64>,
}

impl TrajectoryRecord {
    fn new(realization: u64, n: usize, m: usize) -> Self {
        Self {
            realization,
            times: Vec::new(),
            status: Termination::Completed,
            n,
            m,
            x: Vec::new(),
            xbar: Vec::new(),
            xi: Vec::new(),
            phi: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, x: &DVector<f64>, model: &SystemModel) -> Result<(), EnvelopeBreach> {
        let xbar = model.graph().relative_positions(x);
        let states = model.ppc().edge_states(xbar.as_slice(), t)?;
        self.times.push(t);
        self.x.extend(x.iter());
        self.xbar.extend(xbar.iter());
        self.xi.extend(states.iter().map(|e| e.xi));
        self.phi.extend(states.iter().map(|e| e.phi));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn agents(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> usize {
        self.m
    }

    pub fn completed(&self) -> bool {
        self.status == Termination::Completed
    }

    pub fn x(&self, sample: usize) -> &[f64] {
        &self.x[sample * self.n..(sample + 1) * self.n]
    }

    pub fn xbar(&self, sample: usize) -> &[f64] {
        &self.xbar[sample * self.m..(sample + 1) * self.m]
    }

    pub fn xi(&self, sample: usize) -> &[f64] {
        &self.xi[sample * self.m..(sample + 1) * self.m]
    }

    /// Diagonal of `Φ_t` at the sample.
    pub fn phi(&self, sample: usize) -> &[f64] {
        &self.phi[sample * self.m..(sample + 1) * self.m]
    }

    pub fn state(&self, model: &SystemModel, sample: usize) -> AugmentedState {
        AugmentedState::from_nodes(model, DVector::from_column_slice(self.x(sample)), self.times[sample])
            .expect("recorded samples are inside the envelopes")
    }
}

/// Explicit Euler–Maruyama step `x + (-L x + v) dt + G(x) noise`, where `noise`
/// already carries the `√dt` scaling.
pub fn step(
    model: &SystemModel,
    controller: Controller,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
    noise: &DVector<f64>,
) -> Result<DVector<f64>, EnvelopeBreach> {
    let v = if controller.uses_envelope() {
        let state = AugmentedState::from_nodes(model, x.clone(), t)?;
        controller.control(model, &state)
    } else {
        DVector::zeros(x.len())
    };
    let drift = v - model.graph().laplacian() * x;
    Ok(x + drift * dt + model.node_diffusion(x) * noise)
}

/// Closed-loop drift `f(y) = -D (xbar + h(xbar))` and `diag(1 + h'(xbar))`, or `None`
/// if some edge is outside its envelope.
fn closed_loop(model: &SystemModel, controller: Controller, y: &DVector<f64>, t: f64) -> Option<(DVector<f64>, Vec<f64>)> {
    let graph = model.graph();
    let xbar = graph.relative_positions(y);
    let m = xbar.len();
    let mut g = vec![0.0; m];
    let mut slope = vec![1.0; m];
    if controller.uses_envelope() {
        let c = controller.xi_weight();
        for k in 0..m {
            let rho = model.ppc().get(k).rho(t).ok()?;
            let xhat = xbar[k] / rho;
            if !(xhat.abs() <= 1.0 - BREACH_TOLERANCE) {
                return None;
            }
            let s = 1.0 - xhat * xhat;
            let phi = 2.0 / (rho * s);
            let xi = 2.0 * xhat.atanh();
            g[k] = xbar[k] + phi * phi * xbar[k] + c * xi;
            slope[k] = 1.0 + phi * phi * (1.0 + 4.0 * xhat * xhat / s) + c * phi;
        }
    } else {
        g.copy_from_slice(xbar.as_slice());
    }
    Some((apply_incidence(graph, &g), slope))
}

fn inside(model: &SystemModel, controller: Controller, y: &DVector<f64>, t: f64) -> bool {
    !controller.uses_envelope()
        || model.ppc().first_breach(model.graph().relative_positions(y).as_slice(), t).is_none()
}

/// Drift-implicit step: solves `y = x + G(x) noise + dt f(y, t + dt)`.
/// Returns `None` if Newton fails to converge.
pub fn implicit_step(
    model: &SystemModel,
    controller: Controller,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
    noise: &DVector<f64>,
) -> Option<DVector<f64>> {
    let t1 = t + dt;
    let base = x + model.node_diffusion(x) * noise;
    let d = model.graph().incidence();

    // Start from x, contracted towards its mean until it fits the envelopes at t1.
    let mean = x.mean();
    let mut y = x.clone();
    let mut scale = 1.0;
    while !inside(model, controller, &y, t1) {
        scale *= 0.5;
        if scale < 1e-12 {
            y = DVector::from_element(x.len(), mean);
            break;
        }
        y = x.map(|xi| mean + scale * (xi - mean));
    }

    let (mut f, mut slope) = closed_loop(model, controller, &y, t1)?;
    for _ in 0..NEWTON_MAX_ITER {
        let residual = &y - &base - &f * dt;
        let tol = 1e-12 * (1.0 + y.amax());
        if residual.amax() <= tol {
            return Some(y);
        }
        // I - dt J_f = I + dt D diag(1 + h') Dᵀ is symmetric positive definite.
        let mut weighted = d.clone();
        for (k, mut col) in weighted.column_iter_mut().enumerate() {
            col *= slope[k] * dt;
        }
        let jac = DMatrix::identity(x.len(), x.len()) + weighted * d.transpose();
        let delta = Cholesky::new(jac)?.solve(&(-residual));

        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..NEWTON_MAX_HALVINGS {
            let candidate = &y + &delta * lambda;
            if let Some(eval) = closed_loop(model, controller, &candidate, t1) {
                accepted = Some((candidate, eval));
                break;
            }
            lambda *= 0.5;
        }
        let (next, (f_next, slope_next)) = accepted?;
        if (&next - &y).amax() <= 1e-15 * (1.0 + y.amax()) {
            return Some(next);
        }
        y = next;
        f = f_next;
        slope = slope_next;
    }
    None
}

fn realization_rng(seed: u64, realization: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(realization);
    rng
}

/// Integrates one realization to the horizon or to its first envelope breach.
///
/// The config must have passed [`SimConfig::validate`].
pub fn run_one(model: &SystemModel, controller: Controller, cfg: &SimConfig, realization: u64) -> TrajectoryRecord {
    let mut rng = realization_rng(cfg.seed, realization);
    let mut record = TrajectoryRecord::new(realization, model.agents(), model.edges());
    let w = model.noise_dim();
    let sqrt_dt = cfg.dt.sqrt();
    let steps = cfg.steps();
    let mut x = cfg.x0.clone();

    if let Err(b) = record.push(0.0, &x, model) {
        record.status = Termination::EnvelopeBreach(b);
        return record;
    }
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let t1 = (k + 1) as f64 * cfg.dt;
        let noise = DVector::from_fn(w, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sqrt_dt
        });
        let next = match cfg.scheme {
            Scheme::Explicit => match step(model, controller, &x, t, cfg.dt, &noise) {
                Ok(next) => next,
                Err(b) => {
                    record.status = Termination::EnvelopeBreach(b);
                    return record;
                }
            },
            Scheme::DriftImplicit => match implicit_step(model, controller, &x, t, cfg.dt, &noise) {
                Some(next) => next,
                None => {
                    record.status = Termination::SolverFailure { t };
                    return record;
                }
            },
        };
        x = next;
        let xbar = model.graph().relative_positions(&x);
        if let Some(b) = model.ppc().first_breach(xbar.as_slice(), t1) {
            record.status = Termination::EnvelopeBreach(b);
            return record;
        }
        if (k + 1) % cfg.sample_every == 0 || k + 1 == steps {
            record.push(t1, &x, model).expect("checked above");
        }
    }
    record
}

/// Runs every realization and maps its record through `f`; results are in
/// realization order. Parallel when the `parallel` feature is enabled.
pub fn map_realizations<T, F>(model: &SystemModel, controller: Controller, cfg: &SimConfig, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(TrajectoryRecord) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..cfg.realizations as u64)
            .into_par_iter()
            .map(|r| f(run_one(model, controller, cfg, r)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_realizations_sequential(model, controller, cfg, f)
    }
}

pub fn map_realizations_sequential<T, F>(model: &SystemModel, controller: Controller, cfg: &SimConfig, f: F) -> Vec<T>
where
    F: Fn(TrajectoryRecord) -> T,
{
    (0..cfg.realizations as u64).map(|r| f(run_one(model, controller, cfg, r))).collect()
}

/// Per-path reduction used by the ensemble statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSummary {
    pub status: Termination,
    /// `‖xbar‖²` per recorded sample.
    pub sq_norm: Vec<f64>,
    /// `|xbar_k|` per recorded sample, row-major.
    pub abs_xbar: Vec<f64>,
    /// `max_k |xbar_k(T)|`, `NaN` unless completed.
    pub final_max_abs: f64,
    /// `max_{t >= T/2} max_k |xbar_k(t)|`, `NaN` unless completed.
    pub late_max_abs: f64,
}

impl PathSummary {
    pub fn from_record(record: &TrajectoryRecord, horizon: f64) -> Self {
        let m = record.edges();
        let abs_xbar: Vec<f64> = record.xbar.iter().map(|v| v.abs()).collect();
        let sq_norm = (0..record.len()).map(|s| record.xbar(s).iter().map(|v| v * v).sum()).collect();
        let max_at = |s: usize| abs_xbar[s * m..(s + 1) * m].iter().copied().fold(0.0, f64::max);
        let (final_max_abs, late_max_abs) = if record.completed() {
            let last = record.len() - 1;
            let late = (0..record.len())
                .filter(|&s| record.times[s] >= 0.5 * horizon - 1e-12)
                .map(max_at)
                .fold(0.0, f64::max);
            (max_at(last), late)
        } else {
            (f64::NAN, f64::NAN)
        };
        Self { status: record.status, sq_norm, abs_xbar, final_max_abs, late_max_abs }
    }
}

/// Statistics over all realizations at each recorded sample time.
///
/// A path that left its envelope contributes to the moments only up to its last
/// recorded sample and is counted in `breaches_by_sample` from then on.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub realizations: usize,
    pub edges: usize,
    pub times: Vec<f64>,
    /// Number of paths contributing at each sample.
    pub active: Vec<usize>,
    pub mean_sq: Vec<f64>,
    /// 95% normal-approximation half-width of `mean_sq`.
    pub ci_half_width: Vec<f64>,
    /// `E|xbar_k|` per sample, row-major.
    pub mean_abs: Vec<f64>,
    /// `E|xbar_k|²` per sample, row-major.
    pub mean_sq_edge: Vec<f64>,
    /// Cumulative breaches up to each sample time.
    pub breaches_by_sample: Vec<usize>,
    pub breaches: usize,
    pub solver_failures: usize,
    pub final_max_abs: Vec<f64>,
    pub late_max_abs: Vec<f64>,
}

impl EnsembleStats {
    pub fn from_summaries(times: Vec<f64>, edges: usize, paths: &[PathSummary]) -> Self {
        let samples = times.len();
        let mut active = vec![0; samples];
        let mut mean_sq = vec![0.0; samples];
        let mut ci_half_width = vec![0.0; samples];
        let mut mean_abs = vec![0.0; samples * edges];
        let mut mean_sq_edge = vec![0.0; samples * edges];
        for s in 0..samples {
            let present: Vec<&PathSummary> = paths.iter().filter(|p| p.sq_norm.len() > s).collect();
            let count = present.len();
            active[s] = count;
            if count == 0 {
                mean_sq[s] = f64::NAN;
                ci_half_width[s] = f64::NAN;
                mean_abs[s * edges..(s + 1) * edges].fill(f64::NAN);
                mean_sq_edge[s * edges..(s + 1) * edges].fill(f64::NAN);
                continue;
            }
            let nf = count as f64;
            let mean = present.iter().map(|p| p.sq_norm[s]).collect::<CompensatedSum>().value() / nf;
            mean_sq[s] = mean;
            if count > 1 {
                let var = present.iter().map(|p| (p.sq_norm[s] - mean).powi(2)).collect::<CompensatedSum>().value()
                    / (nf - 1.0);
                ci_half_width[s] = 1.96 * (var / nf).sqrt();
            }
            for k in 0..edges {
                let idx = s * edges + k;
                mean_abs[idx] = present.iter().map(|p| p.abs_xbar[idx]).collect::<CompensatedSum>().value() / nf;
                mean_sq_edge[idx] =
                    present.iter().map(|p| p.abs_xbar[idx].powi(2)).collect::<CompensatedSum>().value() / nf;
            }
        }
        let breach_times: Vec<f64> = paths
            .iter()
            .filter_map(|p| match p.status {
                Termination::EnvelopeBreach(b) => Some(b.t),
                _ => None,
            })
            .collect();
        let breaches_by_sample =
            times.iter().map(|&t| breach_times.iter().filter(|&&bt| bt <= t + 1e-12).count()).collect();
        let solver_failures = paths.iter().filter(|p| matches!(p.status, Termination::SolverFailure { .. })).count();
        Self {
            realizations: paths.len(),
            edges,
            times,
            active,
            mean_sq,
            ci_half_width,
            mean_abs,
            mean_sq_edge,
            breaches_by_sample,
            breaches: breach_times.len(),
            solver_failures,
            final_max_abs: paths.iter().map(|p| p.final_max_abs).collect(),
            late_max_abs: paths.iter().map(|p| p.late_max_abs).collect(),
        }
    }

    /// Share of all realizations that completed with `max_k |xbar_k(T)| < delta`.
    pub fn final_fraction_below(&self, delta: f64) -> f64 {
        self.final_max_abs.iter().filter(|&&v| v < delta).count() as f64 / self.realizations as f64
    }

    /// Share of all realizations that completed with `|xbar_k(t)| < delta` for all `k` and `t >= T/2`.
    pub fn late_fraction_below(&self, delta: f64) -> f64 {
        self.late_max_abs.iter().filter(|&&v| v < delta).count() as f64 / self.realizations as f64
    }

    pub fn mean_abs_at(&self, sample: usize) -> &[f64] {
        &self.mean_abs[sample * self.edges..(sample + 1) * self.edges]
    }

    pub fn mean_sq_edge_at(&self, sample: usize) -> &[f64] {
        &self.mean_sq_edge[sample * self.edges..(sample + 1) * self.edges]
    }
}

pub fn run_ensemble(model: &SystemModel, controller: Controller, cfg: &SimConfig) -> EnsembleStats {
    let paths = map_realizations(model, controller, cfg, |r| PathSummary::from_record(&r, cfg.horizon));
    EnsembleStats::from_summaries(cfg.sample_times(), model.edges(), &paths)
}

pub fn run_ensemble_sequential(model: &SystemModel, controller: Controller, cfg: &SimConfig) -> EnsembleStats {
    let paths = map_realizations_sequential(model, controller, cfg, |r| PathSummary::from_record(&r, cfg.horizon));
    EnsembleStats::from_summaries(cfg.sample_times(), model.edges(), &paths)
}
