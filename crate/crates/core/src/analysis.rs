//! Lyapunov functions, their generators along the closed loop, and consensus metrics.
//!
//! States are handled through `eta = [xbar; xi]`. For a `C²` function `V` the
//! generator along `d eta = f dt + B dW` is `∇V·f + ½ tr(Bᵀ ∇²V B)`.
//!
//! * mean-square: `V = ½‖xi‖² + (γ/2)‖xbar‖²`, required to satisfy `LV ≤ -κ V`;
//! * almost-sure: `V = (‖eta‖²/q)^{q/2}` with `q ∈ {1, 2}`, required to satisfy
//!   `LV ≤ -β(eta) ≤ 0` with
//!   `β = (‖eta‖²/q)^{q/2-1} [xbarᵀ(L_e - ½k_g² I)(I + Φ²) xbar + xiᵀ Φ (L_e + α + L_e Φ²) xbar]`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::control::Controller;
use crate::dynamics::{AugmentedState, SystemModel};
use crate::linalg::CompensatedSum;
use crate::sim::{EnsembleStats, TrajectoryRecord};

pub const DECAY_TOLERANCE: f64 = 1e-6;
pub const BETA_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("gamma must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("q must be 1 or 2, got {0}")]
    InvalidQ(u32),
    #[error("V is not differentiable at eta = 0 for q = 1")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LyapunovSpec {
    MeanSquare { gamma: f64 },
    AlmostSure { q: u32 },
}

impl LyapunovSpec {
    pub fn mean_square(gamma: f64) -> Result<Self, AnalysisError> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Self::MeanSquare { gamma })
        } else {
            Err(AnalysisError::InvalidGamma(gamma))
        }
    }

    pub fn almost_sure(q: u32) -> Result<Self, AnalysisError> {
        if q == 1 || q == 2 {
            Ok(Self::AlmostSure { q })
        } else {
            Err(AnalysisError::InvalidQ(q))
        }
    }

    /// Exponent `p` of the sandwich `lower ‖eta‖^p ≤ V ≤ upper ‖eta‖^p`.
    pub fn power(&self) -> f64 {
        match *self {
            Self::MeanSquare { .. } => 2.0,
            Self::AlmostSure { q } => q as f64,
        }
    }

    /// Slope of the lower comparison function.
    pub fn lower_slope(&self) -> f64 {
        match *self {
            Self::MeanSquare { gamma } => 0.5 * gamma.min(1.0),
            Self::AlmostSure { q } => (1.0 / q as f64).powf(q as f64 / 2.0),
        }
    }

    /// Slope of the upper comparison function for `m` edges.
    pub fn upper_slope(&self, m: usize) -> f64 {
        match *self {
            Self::MeanSquare { gamma } => 0.5 * gamma.max(1.0),
            Self::AlmostSure { q } => (2.0 * m as f64 / q as f64).powf(q as f64 / 2.0),
        }
    }

    /// `V` at `eta = [xbar; xi]`.
    pub fn value(&self, xbar: &[f64], xi: &[f64]) -> f64 {
        let sx: f64 = xbar.iter().map(|v| v * v).sum();
        let se: f64 = xi.iter().map(|v| v * v).sum();
        match *self {
            Self::MeanSquare { gamma } => 0.5 * se + 0.5 * gamma * sx,
            Self::AlmostSure { q } => ((sx + se) / q as f64).powf(q as f64 / 2.0),
        }
    }

    /// Gradient and Hessian of `V` with respect to `eta`.
    pub fn gradient_hessian(&self, eta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), AnalysisError> {
        let len = eta.len();
        let m = len / 2;
        match *self {
            Self::MeanSquare { gamma } => {
                let w = DVector::from_fn(len, |i, _| if i < m { gamma } else { 1.0 });
                Ok((eta.component_mul(&w), DMatrix::from_diagonal(&w)))
            }
            Self::AlmostSure { q: 2 } => Ok((eta.clone(), DMatrix::identity(len, len))),
            Self::AlmostSure { .. } => {
                let s = eta.norm_squared();
                if s == 0.0 {
                    return Err(AnalysisError::Singular);
                }
                let r = s.sqrt();
                let grad = eta / r;
                let hess = (DMatrix::identity(len, len) - eta * eta.transpose() / s) / r;
                Ok((grad, hess))
            }
        }
    }
}

pub fn lyapunov_value(spec: &LyapunovSpec, state: &AugmentedState) -> f64 {
    spec.value(state.xbar.as_slice(), state.xi().as_slice())
}

/// `gradᵀ f + ½ tr(Bᵀ H B)`.
pub fn generator_from_parts(grad: &DVector<f64>, hess: &DMatrix<f64>, drift: &DVector<f64>, diffusion: &DMatrix<f64>) -> f64 {
    grad.dot(drift) + 0.5 * (diffusion.transpose() * hess * diffusion).trace()
}

/// Generator of `V` along the augmented dynamics with the controller's input.
pub fn generator_value(
    spec: &LyapunovSpec,
    model: &SystemModel,
    state: &AugmentedState,
    controller: Controller,
) -> Result<f64, AnalysisError> {
    let v = controller.control(model, state);
    let (drift, diffusion) = model.augmented_drift_and_diffusion(state, &v).expect("state built from model");
    let (grad, hess) = spec.gradient_hessian(&state.eta())?;
    Ok(generator_from_parts(&grad, &hess, &drift, &diffusion))
}

/// Mean-square generator written out term by term, edge by edge:
/// `xiᵀΦ(e + α xbar) + γ xbarᵀ e + ½‖Φ DᵀG‖² + (γ/2)‖DᵀG‖²`, `e = -L_e xbar + Dᵀ v`.
pub fn mean_square_generator_expanded(gamma: f64, model: &SystemModel, state: &AugmentedState, controller: Controller) -> f64 {
    let graph = model.graph();
    let edges = graph.edges();
    let n = graph.vertex_count();
    let v = controller.control(model, state);
    let g: Vec<f64> = state.x.iter().map(|&xi| model.diffusion().eval(xi)).collect();

    // D xbar at each node, then e_k = -(D xbar)_h + (D xbar)_t + v_h - v_t.
    let mut node = vec![0.0; n];
    for (k, &(h, t)) in edges.iter().enumerate() {
        node[h] += state.xbar[k];
        node[t] -= state.xbar[k];
    }
    let mut total = CompensatedSum::default();
    for (k, (&(h, t), e)) in edges.iter().zip(state.edge_states()).enumerate() {
        let edot = -(node[h] - node[t]) + v[h] - v[t];
        total.add(e.xi * e.phi * (edot + e.alpha * state.xbar[k]));
        total.add(gamma * state.xbar[k] * edot);
        let noise_sq = match model.noise_mode() {
            crate::dynamics::NoiseMode::Shared => (g[h] - g[t]).powi(2),
            crate::dynamics::NoiseMode::Independent => g[h] * g[h] + g[t] * g[t],
        };
        total.add(0.5 * e.phi * e.phi * noise_sq + 0.5 * gamma * noise_sq);
    }
    total.value()
}

/// Generator with gradient and Hessian of `v` taken by central differences.
pub fn generator_numeric<F: Fn(&DVector<f64>) -> f64>(
    v: F,
    eta: &DVector<f64>,
    drift: &DVector<f64>,
    diffusion: &DMatrix<f64>,
    h: f64,
) -> f64 {
    let len = eta.len();
    let shifted = |i: usize, di: f64, j: usize, dj: f64| {
        let mut p = eta.clone();
        p[i] += di;
        p[j] += dj;
        v(&p)
    };
    let grad = DVector::from_fn(len, |i, _| (shifted(i, h, i, 0.0) - shifted(i, -h, i, 0.0)) / (2.0 * h));
    let hess = DMatrix::from_fn(len, len, |i, j| {
        (shifted(i, h, j, h) - shifted(i, h, j, -h) - shifted(i, -h, j, h) + shifted(i, -h, j, -h)) / (4.0 * h * h)
    });
    generator_from_parts(&grad, &hess, drift, diffusion)
}

/// `β(eta)` of the almost-sure analysis; `0` at `eta = 0`.
pub fn beta(q: u32, model: &SystemModel, state: &AugmentedState) -> f64 {
    let le = model.graph().edge_laplacian();
    let kg2 = model.diffusion().lipschitz().powi(2);
    let m = state.xbar.len();
    let phi = state.phi();
    let alpha = state.alpha();
    let xi = state.xi();
    let s = state.xbar.norm_squared() + xi.norm_squared();
    if s == 0.0 {
        return 0.0;
    }
    let phi2 = phi.map(|p| p * p);
    let top = (le - DMatrix::identity(m, m) * (0.5 * kg2)) * state.xbar.component_mul(&phi2.add_scalar(1.0));
    let inner = le * &state.xbar + alpha.component_mul(&state.xbar) + le * phi2.component_mul(&state.xbar);
    let bottom = phi.component_mul(&inner);
    let scale = (s / q as f64).powf(q as f64 / 2.0 - 1.0);
    scale * (state.xbar.dot(&top) + xi.dot(&bottom))
}

/// `xi_k xbar_k ≥ 0` on every edge of every recorded sample.
pub fn sign_property_holds(record: &TrajectoryRecord) -> bool {
    (0..record.len()).all(|s| record.xi(s).iter().zip(record.xbar(s)).all(|(a, b)| a * b >= 0.0))
}

/// Per-path pointwise decay data for the mean-square function.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayPath {
    pub completed: bool,
    pub samples: usize,
    pub violations: usize,
    /// `max (LV + κV)` over the samples.
    pub worst_excess: f64,
    /// `V` at each recorded sample.
    pub v: Vec<f64>,
    /// `‖eta‖²` at each recorded sample.
    pub eta_sq: Vec<f64>,
}

pub fn decay_along(model: &SystemModel, record: &TrajectoryRecord, controller: Controller, gamma: f64, kappa: f64) -> DecayPath {
    let spec = LyapunovSpec::MeanSquare { gamma };
    let mut out = DecayPath {
        completed: record.completed(),
        samples: record.len(),
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
        v: Vec::with_capacity(record.len()),
        eta_sq: Vec::with_capacity(record.len()),
    };
    for s in 0..record.len() {
        let state = record.state(model, s);
        let v = lyapunov_value(&spec, &state);
        let lv = generator_value(&spec, model, &state, controller).expect("smooth V");
        let excess = lv + kappa * v;
        if excess > DECAY_TOLERANCE {
            out.violations += 1;
        }
        out.worst_excess = out.worst_excess.max(excess);
        out.v.push(v);
        out.eta_sq.push(state.eta().norm_squared());
    }
    out
}

/// Ensemble view of the mean-square decay inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub samples: usize,
    pub violations: usize,
    pub worst_excess: f64,
    pub v_mean: Vec<f64>,
    pub v_ci: Vec<f64>,
    /// `upper · (upper/lower) ‖eta0‖² e^{-κ t}`.
    pub v_bound: Vec<f64>,
    pub eta_sq_mean: Vec<f64>,
    pub eta_sq_ci: Vec<f64>,
    /// `(upper/lower) ‖eta0‖² e^{-κ t}`.
    pub eta_sq_bound: Vec<f64>,
    /// Pointwise violations per sample time.
    pub violations_by_sample: Vec<usize>,
}

fn mean_and_ci<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let nf = n as f64;
    let mean = values.clone().copied().collect::<CompensatedSum>().value() / nf;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).collect::<CompensatedSum>().value() / (nf - 1.0);
    (mean, 1.96 * (var / nf).sqrt())
}

impl DecayReport {
    pub fn from_paths(times: Vec<f64>, gamma: f64, kappa: f64, m: usize, paths: &[DecayPath], pointwise: &[Vec<bool>]) -> Self {
        let spec = LyapunovSpec::MeanSquare { gamma };
        let ratio = spec.upper_slope(m) / spec.lower_slope();
        let eta0 = paths.iter().find(|p| !p.eta_sq.is_empty()).map_or(0.0, |p| p.eta_sq[0]);
        let mut report = Self {
            samples: paths.iter().map(|p| p.samples).sum(),
            violations: paths.iter().map(|p| p.violations).sum(),
            worst_excess: paths.iter().map(|p| p.worst_excess).fold(f64::NEG_INFINITY, f64::max),
            v_mean: vec![],
            v_ci: vec![],
            v_bound: vec![],
            eta_sq_mean: vec![],
            eta_sq_ci: vec![],
            eta_sq_bound: vec![],
            violations_by_sample: vec![],
            times,
        };
        for (s, &t) in report.times.iter().enumerate() {
            let (vm, vc) = mean_and_ci(paths.iter().filter_map(|p| p.v.get(s)));
            let (em, ec) = mean_and_ci(paths.iter().filter_map(|p| p.eta_sq.get(s)));
            let eta_bound = ratio * eta0 * (-kappa * t).exp();
            report.v_mean.push(vm);
            report.v_ci.push(vc);
            report.eta_sq_mean.push(em);
            report.eta_sq_ci.push(ec);
            report.eta_sq_bound.push(eta_bound);
            report.v_bound.push(spec.upper_slope(m) * eta_bound);
            report.violations_by_sample.push(pointwise.iter().filter(|p| p.get(s) == Some(&true)).count());
        }
        report
    }

    pub fn pointwise_ok(&self) -> bool {
        self.violations == 0
    }

    /// Lower CI edges of `E V` and `E‖eta‖²` stay below their bounds at every sample.
    pub fn envelope_ok(&self) -> bool {
        (0..self.times.len()).all(|s| {
            self.v_mean[s] - self.v_ci[s] <= self.v_bound[s] && self.eta_sq_mean[s] - self.eta_sq_ci[s] <= self.eta_sq_bound[s]
        })
    }

    /// `t,V_mean,V_bound,LV_violations,beta_mean` (no `beta` for this function, left empty).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,V_mean,V_bound,LV_violations,beta_mean\n");
        for s in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{},{},\n",
                self.times[s], self.v_mean[s], self.v_bound[s], self.violations_by_sample[s]
            ));
        }
        out
    }
}

/// Pointwise violation flags of one path, aligned with its samples.
pub fn violation_flags(model: &SystemModel, record: &TrajectoryRecord, controller: Controller, gamma: f64, kappa: f64) -> Vec<bool> {
    let spec = LyapunovSpec::MeanSquare { gamma };
    (0..record.len())
        .map(|s| {
            let state = record.state(model, s);
            let lv = generator_value(&spec, model, &state, controller).expect("smooth V");
            lv + kappa * lyapunov_value(&spec, &state) > DECAY_TOLERANCE
        })
        .collect()
}

/// Per-path data for the almost-sure analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct BarbalatPath {
    pub completed: bool,
    pub beta: Vec<f64>,
    pub v: Vec<f64>,
    /// Samples with `LV > 1e-6`.
    pub positive_generator: usize,
    /// Samples where `LV` is undefined (`q = 1` at `eta = 0`).
    pub singular: usize,
}

pub fn barbalat_along(model: &SystemModel, record: &TrajectoryRecord, q: u32) -> BarbalatPath {
    let spec = LyapunovSpec::AlmostSure { q };
    let mut out = BarbalatPath {
        completed: record.completed(),
        beta: Vec::with_capacity(record.len()),
        v: Vec::with_capacity(record.len()),
        positive_generator: 0,
        singular: 0,
    };
    for s in 0..record.len() {
        let state = record.state(model, s);
        out.beta.push(beta(q, model, &state));
        out.v.push(lyapunov_value(&spec, &state));
        match generator_value(&spec, model, &state, Controller::AlmostSure) {
            Ok(lv) if lv > BETA_TOLERANCE => out.positive_generator += 1,
            Ok(_) => {}
            Err(_) => out.singular += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarbalatReport {
    pub times: Vec<f64>,
    pub min_beta: f64,
    pub beta_mean: Vec<f64>,
    pub v_mean: Vec<f64>,
    pub positive_generator: usize,
    pub singular: usize,
}

impl BarbalatReport {
    pub fn from_paths(times: Vec<f64>, paths: &[BarbalatPath]) -> Self {
        let min_beta = paths.iter().flat_map(|p| p.beta.iter().copied()).fold(f64::INFINITY, f64::min);
        let beta_mean = (0..times.len()).map(|s| mean_and_ci(paths.iter().filter_map(|p| p.beta.get(s))).0).collect();
        let v_mean = (0..times.len()).map(|s| mean_and_ci(paths.iter().filter_map(|p| p.v.get(s))).0).collect();
        Self {
            times,
            min_beta,
            beta_mean,
            v_mean,
            positive_generator: paths.iter().map(|p| p.positive_generator).sum(),
            singular: paths.iter().map(|p| p.singular).sum(),
        }
    }

    pub fn nonnegative(&self) -> bool {
        self.min_beta >= -BETA_TOLERANCE
    }

    /// `mean β(T) / mean β(0)`.
    pub fn decay_ratio(&self) -> f64 {
        self.beta_mean.last().copied().unwrap_or(f64::NAN) / self.beta_mean.first().copied().unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,V_mean,V_bound,LV_violations,beta_mean\n");
        for s in 0..self.times.len() {
            out.push_str(&format!("{},{},,,{}\n", self.times[s], self.v_mean[s], self.beta_mean[s]));
        }
        out
    }
}

/// Consensus metrics of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMetrics {
    /// `E‖xbar(T)‖²`.
    pub final_mean_sq: f64,
    /// Least-squares rate `r` in `E‖xbar(t)‖² ≈ c e^{-r t}`.
    pub decay_rate: f64,
    /// Share of paths with `max_k |xbar_k(t)| < δ` for all `t ≥ T/2`.
    pub as_fraction: f64,
    /// Share of paths with `max_k |xbar_k(T)| < δ`.
    pub final_fraction: f64,
    /// `max_{t,k} E|xbar_k(t)|^q / rho_k(t)^q`.
    pub moment_ratio: f64,
}

pub fn consensus_metrics(stats: &EnsembleStats, model: &SystemModel, delta: f64, q: u32) -> ConsensusMetrics {
    let last = stats.mean_sq.len() - 1;
    let mut moment_ratio: f64 = 0.0;
    for (s, &t) in stats.times.iter().enumerate() {
        let moments = if q == 1 { stats.mean_abs_at(s) } else { stats.mean_sq_edge_at(s) };
        for (k, &mk) in moments.iter().enumerate() {
            let rho = model.ppc().get(k).rho(t).expect("non-negative time");
            if mk.is_finite() {
                moment_ratio = moment_ratio.max(mk / rho.powi(q as i32));
            }
        }
    }
    ConsensusMetrics {
        final_mean_sq: stats.mean_sq[last],
        decay_rate: fit_decay_rate(&stats.times, &stats.mean_sq),
        as_fraction: stats.late_fraction_below(delta),
        final_fraction: stats.final_fraction_below(delta),
        moment_ratio,
    }
}

/// `-slope` of the least-squares line through `(t, ln y)` over positive finite `y`;
/// `0` when fewer than two usable points remain.
pub fn fit_decay_rate(times: &[f64], values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, &y)| y.is_finite() && y > 1e-300)
        .map(|(&t, &y)| (t, y.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        -sxy / sxx
    }
}

/// First sample time at which `E‖xbar‖²` drops below `threshold`, together with the
/// first times at which its lower and upper 95% CI edges do.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingTime {
    pub estimate: f64,
    pub earliest: f64,
    pub latest: f64,
}

pub fn time_below(stats: &EnsembleStats, threshold: f64) -> Option<CrossingTime> {
    let first = |f: &dyn Fn(usize) -> f64| (0..stats.times.len()).find(|&s| f(s) < threshold).map(|s| stats.times[s]);
    Some(CrossingTime {
        estimate: first(&|s| stats.mean_sq[s])?,
        earliest: first(&|s| stats.mean_sq[s] - stats.ci_half_width[s])?,
        latest: first(&|s| stats.mean_sq[s] + stats.ci_half_width[s])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DiffusionFunction, DiffusionKind, NoiseMode};
    use crate::graph::Graph;
    use crate::ppc::{PerformanceFunction, PpcBank};
    use crate::reference::{self, reference_model};
    use crate::sim::{run_ensemble, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_state(rng: &mut ChaCha8Rng, model: &SystemModel) -> AugmentedState {
        let t = rng.random_range(0.0..3.0);
        let xbar: Vec<f64> = (0..model.edges())
            .map(|k| rng.random_range(-0.95..0.95) * model.ppc().get(k).rho(t).unwrap())
            .collect();
        let x = model.graph().positions_from_relative(&xbar).unwrap().add_scalar(rng.random_range(-2.0..2.0));
        AugmentedState::from_nodes(model, x, t).unwrap()
    }

    fn p2_model(diffusion: DiffusionFunction) -> SystemModel {
        let pf = PerformanceFunction::new(5.0, 0.1, 1.5).unwrap();
        SystemModel::new(Graph::path(2).unwrap(), diffusion, NoiseMode::Shared, PpcBank::uniform(pf, 1)).unwrap()
    }

    #[test]
    fn lyapunov_values() {
        let thm1 = LyapunovSpec::mean_square(4.0).unwrap();
        assert_eq!(thm1.value(&[2.0], &[1.0]), 8.5);
        assert_eq!(thm1.value(&[0.0; 3], &[0.0; 3]), 0.0);
        let thm2 = LyapunovSpec::almost_sure(2).unwrap();
        assert_eq!(thm2.value(&[1.0], &[1.0]), 1.0);
        assert!(LyapunovSpec::almost_sure(3).is_err());
        assert!(LyapunovSpec::mean_square(0.0).is_err());
    }

    #[test]
    fn sandwich_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let specs = [
            LyapunovSpec::mean_square(4.0).unwrap(),
            LyapunovSpec::mean_square(0.3).unwrap(),
            LyapunovSpec::almost_sure(1).unwrap(),
            LyapunovSpec::almost_sure(2).unwrap(),
        ];
        for _ in 0..2000 {
            let m = rng.random_range(1..8);
            let xbar: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let xi: Vec<f64> = (0..m).map(|_| rng.random_range(-8.0..8.0)).collect();
            let norm = (xbar.iter().chain(&xi).map(|v| v * v).sum::<f64>()).sqrt();
            for spec in &specs {
                let v = spec.value(&xbar, &xi);
                let p = norm.powf(spec.power());
                assert!(v >= spec.lower_slope() * p * (1.0 - 1e-12));
                assert!(v <= spec.upper_slope(m) * p * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn generator_vanishes_at_consensus() {
        let model = reference_model(1.5);
        let state = AugmentedState::from_nodes(&model, DVector::from_element(6, 1.3), 0.7).unwrap();
        for (spec, c) in [
            (LyapunovSpec::MeanSquare { gamma: 4.0 }, Controller::MeanSquare),
            (LyapunovSpec::AlmostSure { q: 2 }, Controller::AlmostSure),
        ] {
            assert_eq!(generator_value(&spec, &model, &state, c).unwrap(), 0.0);
        }
        assert_eq!(
            generator_value(&LyapunovSpec::AlmostSure { q: 1 }, &model, &state, Controller::AlmostSure),
            Err(AnalysisError::Singular)
        );
        assert_eq!(beta(1, &model, &state), 0.0);
    }

    #[test]
    fn mean_square_generator_codings_agree() {
        let g = DiffusionFunction::new(DiffusionKind::ExpSin { a: 0.1, b: 1.0 }).unwrap();
        let model = p2_model(g);
        let state = AugmentedState::from_nodes(&model, DVector::from_column_slice(&[2.0, 0.0]), 0.0).unwrap();
        let spec = LyapunovSpec::MeanSquare { gamma: 4.0 };
        let a = generator_value(&spec, &model, &state, Controller::MeanSquare).unwrap();
        let b = mean_square_generator_expanded(4.0, &model, &state, Controller::MeanSquare);
        assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{a} {b}");

        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for mode in [NoiseMode::Shared, NoiseMode::Independent] {
            let model = SystemModel::new(reference::graph(), reference::diffusion(), mode, reference::ppc(1.5)).unwrap();
            for _ in 0..300 {
                let state = random_state(&mut rng, &model);
                for c in Controller::ALL {
                    let a = generator_value(&spec, &model, &state, c).unwrap();
                    let b = mean_square_generator_expanded(4.0, &model, &state, c);
                    assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn generator_matches_finite_differences() {
        let model = reference_model(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let state = random_state(&mut rng, &model);
            for (spec, c) in [
                (LyapunovSpec::MeanSquare { gamma: 4.0 }, Controller::MeanSquare),
                (LyapunovSpec::AlmostSure { q: 2 }, Controller::AlmostSure),
                (LyapunovSpec::AlmostSure { q: 1 }, Controller::AlmostSure),
            ] {
                let v = c.control(&model, &state);
                let (drift, diffusion) = model.augmented_drift_and_diffusion(&state, &v).unwrap();
                let m = model.edges();
                let eta = state.eta();
                let numeric = generator_numeric(
                    |e| spec.value(&e.as_slice()[..m], &e.as_slice()[m..]),
                    &eta,
                    &drift,
                    &diffusion,
                    1e-4 * (1.0 + eta.amax()),
                );
                let exact = generator_value(&spec, &model, &state, c).unwrap();
                assert!((numeric - exact).abs() < 1e-5 * (1.0 + exact.abs()), "{spec:?}: {numeric} {exact}");
            }
        }
    }

    #[test]
    fn generator_is_linear_in_v() {
        let model = reference_model(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let s1 = LyapunovSpec::MeanSquare { gamma: 4.0 };
        let s2 = LyapunovSpec::AlmostSure { q: 1 };
        for _ in 0..200 {
            let state = random_state(&mut rng, &model);
            let (a, b) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
            let v = Controller::MeanSquare.control(&model, &state);
            let (drift, diffusion) = model.augmented_drift_and_diffusion(&state, &v).unwrap();
            let (g1, h1) = s1.gradient_hessian(&state.eta()).unwrap();
            let (g2, h2) = s2.gradient_hessian(&state.eta()).unwrap();
            let combined = generator_from_parts(&(&g1 * a + &g2 * b), &(&h1 * a + &h2 * b), &drift, &diffusion);
            let separate = a * generator_value(&s1, &model, &state, Controller::MeanSquare).unwrap()
                + b * generator_value(&s2, &model, &state, Controller::MeanSquare).unwrap();
            assert!((combined - separate).abs() <= 1e-10 * (1.0 + separate.abs()));
        }
    }

    #[test]
    fn generator_matches_one_step_monte_carlo() {
        let model = reference_model(1.5);
        let x = DVector::from_column_slice(&[0.0, -1.0, 0.5, 0.8, -0.3, 1.2]);
        let state = AugmentedState::from_nodes(&model, x, 0.5).unwrap();
        let spec = LyapunovSpec::MeanSquare { gamma: 4.0 };
        let v = Controller::MeanSquare.control(&model, &state);
        let (drift, diffusion) = model.augmented_drift_and_diffusion(&state, &v).unwrap();
        let eta = state.eta();
        let m = model.edges();
        let value = |e: &DVector<f64>| spec.value(&e.as_slice()[..m], &e.as_slice()[m..]);
        let v0 = value(&eta);
        let dt = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let next = &eta + &drift * dt + diffusion.column(0) * (z * dt.sqrt());
                (value(&next) - v0) / dt
            })
            .collect();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let se = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let exact = generator_value(&spec, &model, &state, Controller::MeanSquare).unwrap();
        assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn beta_is_nonnegative_on_random_reference_states() {
        let model = reference_model(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..10_000 {
            let state = random_state(&mut rng, &model);
            for q in [1, 2] {
                assert!(beta(q, &model, &state) >= -BETA_TOLERANCE);
            }
        }
    }

    #[test]
    fn noiseless_p2_decays_without_violations() {
        let model = p2_model(DiffusionFunction::zero());
        let cfg = SimConfig { horizon: 2.0, ..SimConfig::new(DVector::from_column_slice(&[2.0, -1.0])) };
        let rec = crate::sim::run_one(&model, Controller::MeanSquare, &cfg, 0);
        // single edge, rho0 = 5: the worst-case rate condition gives kappa = 0.2
        let path = decay_along(&model, &rec, Controller::MeanSquare, 4.0, 0.2);
        assert_eq!(path.violations, 0);
        assert!(sign_property_holds(&rec));
        // LV <= -kappa V without noise makes V non-increasing
        assert!(path.v.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn metrics_of_zero_trajectories() {
        let model = reference_model(1.5);
        let cfg = SimConfig { horizon: 0.5, realizations: 3, ..SimConfig::new(DVector::from_element(6, 0.0)) };
        let noiseless = SystemModel::new(reference::graph(), DiffusionFunction::zero(), NoiseMode::Shared, reference::ppc(1.5)).unwrap();
        let stats = run_ensemble(&noiseless, Controller::MeanSquare, &cfg);
        let m = consensus_metrics(&stats, &model, 1.0, 2);
        assert_eq!((m.final_mean_sq, m.moment_ratio, m.decay_rate), (0.0, 0.0, 0.0));
        assert_eq!((m.as_fraction, m.final_fraction), (1.0, 1.0));
    }

    #[test]
    fn uncontrolled_decay_rate_is_twice_slowest_mode() {
        let graph = Graph::path(4).unwrap();
        let pf = PerformanceFunction::new(50.0, 0.1, 0.1).unwrap();
        let model = SystemModel::new(graph.clone(), DiffusionFunction::zero(), NoiseMode::Shared, PpcBank::uniform(pf, 3)).unwrap();
        let eig = nalgebra::SymmetricEigen::new(graph.edge_laplacian().clone());
        let (idx, lambda) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |a, (i, &l)| if l < a.1 { (i, l) } else { a });
        let mode: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let x0 = graph.positions_from_relative(&mode).unwrap();
        let cfg = SimConfig { dt: 1e-4, horizon: 2.0, sample_every: 100, ..SimConfig::new(x0) };
        let stats = run_ensemble(&model, Controller::None, &cfg);
        let rate = consensus_metrics(&stats, &model, 1.0, 2).decay_rate;
        assert!((rate - 2.0 * lambda).abs() < 1e-3 * lambda, "{rate} vs {}", 2.0 * lambda);
    }

    #[test]
    fn fit_recovers_exponential() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|t| 3.0 * (-1.7 * t).exp()).collect();
        assert!((fit_decay_rate(&t, &y) - 1.7).abs() < 1e-12);
    }
}
