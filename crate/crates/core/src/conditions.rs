//! Sufficient conditions of the two convergence results, checked as eigenvalue margins.
//!
//! Every matrix inequality `M ≥ c I` is read as `λ_min(½(M + Mᵀ)) - c ≥ 0`.
//! `Φ` is unbounded above and only bounded below by `2/rho_k0`, so the
//! worst-case checks evaluate at `Φ_min = diag(2/rho_k0)`; the trajectory checks
//! evaluate at each recorded `Φ_t` instead.
//!
//! | name                 | inequality                                                   |
//! |----------------------|--------------------------------------------------------------|
//! | `envelope-decay`     | `L_e(I + γΦ⁻¹ + Φ²) - ε̄ I ≥ 0`                              |
//! | `convergence-rate`   | `Φ L_e ≥ 2κ I`                                               |
//! | `noise-robustness`   | `L_e(I + Φ²) - (k_g²/2)(I + Φ²/γ) ≥ 2κ I`                    |
//! | `almost-sure-margin` | `L_e - ½ k_g² I ≻ 0`                                         |

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::graph::Graph;
use crate::linalg::min_eigenvalue_of_symmetric_part;
use crate::ppc::PpcBank;
use crate::sim::TrajectoryRecord;

pub const PSD_TOLERANCE: f64 = 1e-9;
pub const TRAJECTORY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionName {
    EnvelopeDecay,
    ConvergenceRate,
    NoiseRobustness,
    AlmostSureMargin,
}

impl ConditionName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EnvelopeDecay => "envelope-decay",
            Self::ConvergenceRate => "convergence-rate",
            Self::NoiseRobustness => "noise-robustness",
            Self::AlmostSureMargin => "almost-sure-margin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckMode {
    /// At `Φ_min`, dropping the `γΦ⁻¹` term.
    WorstCase,
    /// At `Φ_min`, keeping `γΦ⁻¹` evaluated at the same point.
    WorstCaseRetained,
    /// At every recorded `Φ_t` of a run.
    Trajectory,
}

impl CheckMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WorstCase => "worst-case",
            Self::WorstCaseRetained => "worst-case-retained",
            Self::Trajectory => "trajectory",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Pass,
    Fail,
    /// The graph is not a tree.
    NotApplicable,
    /// The worst-case point is not provably the worst case (negative `Φ²` coefficient).
    Indeterminate,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "fail",
            Self::NotApplicable => "not-applicable",
            Self::Indeterminate => "indeterminate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionEntry {
    pub name: ConditionName,
    pub mode: CheckMode,
    /// Smallest relevant eigenvalue minus the threshold; `NaN` when not applicable.
    pub margin: f64,
    pub status: Status,
}

impl ConditionEntry {
    fn semidefinite(name: ConditionName, mode: CheckMode, margin: f64, tolerance: f64) -> Self {
        let status = if margin >= -tolerance { Status::Pass } else { Status::Fail };
        Self { name, mode, margin, status }
    }

    fn not_applicable(name: ConditionName, mode: CheckMode) -> Self {
        Self { name, mode, margin: f64::NAN, status: Status::NotApplicable }
    }

    pub fn pass(&self) -> bool {
        self.status == Status::Pass
    }
}

impl fmt::Display for ConditionEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.6} {}", self.name.as_str(), self.mode.as_str(), self.margin, self.status.as_str())
    }
}

/// Parameters used for a set of checks and their outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub gamma: f64,
    pub kappa: f64,
    pub eps_bar: f64,
    pub k_g: f64,
    pub entries: Vec<ConditionEntry>,
}

impl ConditionReport {
    pub fn get(&self, name: ConditionName, mode: CheckMode) -> Option<&ConditionEntry> {
        self.entries.iter().find(|e| e.name == name && e.mode == mode)
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(ConditionEntry::pass)
    }

    /// `name,mode,margin,pass` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mode,margin,pass\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.name.as_str(), e.mode.as_str(), e.margin, e.status.as_str()));
        }
        out
    }
}

/// `Φ_min = diag(2/rho_k0)`.
pub fn phi_min(ppc: &PpcBank) -> Vec<f64> {
    ppc.functions().iter().map(|f| f.phi_min()).collect()
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

/// `λ_min(sym(L_e(I + γΦ⁻¹ + Φ²))) - ε̄`; the `Φ⁻¹` term is skipped when `gamma` is `None`.
pub fn envelope_decay_margin(le: &DMatrix<f64>, phi: &[f64], gamma: Option<f64>, eps_bar: f64) -> f64 {
    let factor: Vec<f64> = phi.iter().map(|p| 1.0 + gamma.map_or(0.0, |g| g / p) + p * p).collect();
    min_eigenvalue_of_symmetric_part(&(le * diag(&factor))) - eps_bar
}

/// `λ_min(sym(Φ L_e)) - 2κ`.
pub fn convergence_rate_margin(le: &DMatrix<f64>, phi: &[f64], kappa: f64) -> f64 {
    min_eigenvalue_of_symmetric_part(&(diag(phi) * le)) - 2.0 * kappa
}

/// `λ_min(sym(L_e(I + Φ²) - (k_g²/2)(I + Φ²/γ))) - 2κ`.
pub fn noise_robustness_margin(le: &DMatrix<f64>, phi: &[f64], gamma: f64, kappa: f64, k_g: f64) -> f64 {
    let phi2: Vec<f64> = phi.iter().map(|p| p * p).collect();
    let one_plus: Vec<f64> = phi2.iter().map(|p| 1.0 + p).collect();
    let noise: Vec<f64> = phi2.iter().map(|p| 0.5 * k_g * k_g * (1.0 + p / gamma)).collect();
    let mat = le * diag(&one_plus) - diag(&noise);
    min_eigenvalue_of_symmetric_part(&mat) - 2.0 * kappa
}

/// `L_e - ½ k_g² I ≻ 0` (strict).
pub fn check_almost_sure(graph: &Graph, k_g: f64) -> ConditionEntry {
    let (name, mode) = (ConditionName::AlmostSureMargin, CheckMode::WorstCase);
    if !graph.is_tree() {
        return ConditionEntry::not_applicable(name, mode);
    }
    let margin = min_eigenvalue_of_symmetric_part(graph.edge_laplacian()) - 0.5 * k_g * k_g;
    let status = if margin > 0.0 { Status::Pass } else { Status::Fail };
    ConditionEntry { name, mode, margin, status }
}

pub fn check_envelope_decay(graph: &Graph, ppc: &PpcBank, gamma: f64, mode: CheckMode) -> ConditionEntry {
    let name = ConditionName::EnvelopeDecay;
    if !graph.is_tree() {
        return ConditionEntry::not_applicable(name, mode);
    }
    let retained = match mode {
        CheckMode::WorstCase => None,
        _ => Some(gamma),
    };
    let margin = envelope_decay_margin(graph.edge_laplacian(), &phi_min(ppc), retained, ppc.eps_bar());
    ConditionEntry::semidefinite(name, mode, margin, PSD_TOLERANCE)
}

pub fn check_convergence_rate(graph: &Graph, ppc: &PpcBank, kappa: f64) -> ConditionEntry {
    let (name, mode) = (ConditionName::ConvergenceRate, CheckMode::WorstCase);
    if !graph.is_tree() {
        return ConditionEntry::not_applicable(name, mode);
    }
    let margin = convergence_rate_margin(graph.edge_laplacian(), &phi_min(ppc), kappa);
    ConditionEntry::semidefinite(name, mode, margin, PSD_TOLERANCE)
}

/// Evaluated at `Φ_min`; indeterminate unless `λ_min(L_e) ≥ k_g²/(2γ)`.
pub fn check_noise_robustness(graph: &Graph, ppc: &PpcBank, gamma: f64, kappa: f64, k_g: f64) -> ConditionEntry {
    let (name, mode) = (ConditionName::NoiseRobustness, CheckMode::WorstCase);
    if !graph.is_tree() {
        return ConditionEntry::not_applicable(name, mode);
    }
    let le = graph.edge_laplacian();
    let margin = noise_robustness_margin(le, &phi_min(ppc), gamma, kappa, k_g);
    let coefficient = min_eigenvalue_of_symmetric_part(le) - k_g * k_g / (2.0 * gamma);
    if coefficient < -PSD_TOLERANCE {
        return ConditionEntry { name, mode, margin, status: Status::Indeterminate };
    }
    ConditionEntry::semidefinite(name, mode, margin, PSD_TOLERANCE)
}

/// All worst-case checks, including both readings of `envelope-decay`.
pub fn worst_case_report(graph: &Graph, ppc: &PpcBank, gamma: f64, kappa: f64, k_g: f64) -> ConditionReport {
    ConditionReport {
        gamma,
        kappa,
        eps_bar: ppc.eps_bar(),
        k_g,
        entries: vec![
            check_envelope_decay(graph, ppc, gamma, CheckMode::WorstCase),
            check_envelope_decay(graph, ppc, gamma, CheckMode::WorstCaseRetained),
            check_convergence_rate(graph, ppc, kappa),
            check_noise_robustness(graph, ppc, gamma, kappa, k_g),
            check_almost_sure(graph, k_g),
        ],
    }
}

/// Minimum margins of the three decay conditions over a sequence of `Φ_t` diagonals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryMargins {
    pub envelope_decay: f64,
    pub convergence_rate: f64,
    pub noise_robustness: f64,
}

impl TrajectoryMargins {
    pub const EMPTY: Self =
        Self { envelope_decay: f64::INFINITY, convergence_rate: f64::INFINITY, noise_robustness: f64::INFINITY };

    pub fn at(le: &DMatrix<f64>, phi: &[f64], gamma: f64, kappa: f64, k_g: f64, eps_bar: f64) -> Self {
        Self {
            envelope_decay: envelope_decay_margin(le, phi, Some(gamma), eps_bar),
            convergence_rate: convergence_rate_margin(le, phi, kappa),
            noise_robustness: noise_robustness_margin(le, phi, gamma, kappa, k_g),
        }
    }

    pub fn min(self, other: Self) -> Self {
        Self {
            envelope_decay: self.envelope_decay.min(other.envelope_decay),
            convergence_rate: self.convergence_rate.min(other.convergence_rate),
            noise_robustness: self.noise_robustness.min(other.noise_robustness),
        }
    }

    /// Smallest of the three margins.
    pub fn min_all(self) -> f64 {
        self.envelope_decay.min(self.convergence_rate).min(self.noise_robustness)
    }

    pub fn entries(self) -> Vec<ConditionEntry> {
        let mode = CheckMode::Trajectory;
        [
            (ConditionName::EnvelopeDecay, self.envelope_decay),
            (ConditionName::ConvergenceRate, self.convergence_rate),
            (ConditionName::NoiseRobustness, self.noise_robustness),
        ]
        .into_iter()
        .map(|(name, margin)| ConditionEntry::semidefinite(name, mode, margin, TRAJECTORY_TOLERANCE))
        .collect()
    }
}

/// Minimum margins over every recorded sample of `record`.
pub fn trajectory_margins(
    graph: &Graph,
    record: &TrajectoryRecord,
    gamma: f64,
    kappa: f64,
    k_g: f64,
    eps_bar: f64,
) -> TrajectoryMargins {
    (0..record.len())
        .map(|s| TrajectoryMargins::at(graph.edge_laplacian(), record.phi(s), gamma, kappa, k_g, eps_bar))
        .fold(TrajectoryMargins::EMPTY, TrajectoryMargins::min)
}

/// Appends trajectory-mode entries for one run to `report`.
pub fn check_trajectory(report: &mut ConditionReport, graph: &Graph, record: &TrajectoryRecord) {
    if !graph.is_tree() {
        for name in [ConditionName::EnvelopeDecay, ConditionName::ConvergenceRate, ConditionName::NoiseRobustness] {
            report.entries.push(ConditionEntry::not_applicable(name, CheckMode::Trajectory));
        }
        return;
    }
    let margins = trajectory_margins(graph, record, report.gamma, report.kappa, report.k_g, report.eps_bar);
    report.entries.extend(margins.entries());
}

/// Logarithmic grid of `gamma` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for GammaGrid {
    fn default() -> Self {
        Self { min: 1e-2, max: 1e3, points: 101 }
    }
}

impl GammaGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points <= 1 {
            return vec![self.min];
        }
        let (a, b) = (self.min.ln(), self.max.ln());
        (0..self.points).map(|i| (a + (b - a) * i as f64 / (self.points - 1) as f64).exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub gamma: f64,
    pub kappa: f64,
    pub report: ConditionReport,
}

/// Largest `κ` over the `γ` grid for which the worst-case checks hold, with
/// `envelope-decay` in its retained reading. For fixed `γ`, `κ` enters the other
/// two conditions only through the threshold, so the best `κ` is half the smaller
/// of their eigenvalues. Ties go to the smallest `γ`. `None` when no grid point
/// admits `κ > 0`.
pub fn search_gamma_kappa(graph: &Graph, ppc: &PpcBank, k_g: f64, grid: GammaGrid) -> Option<SearchOutcome> {
    if !graph.is_tree() {
        return None;
    }
    let le = graph.edge_laplacian();
    let phi = phi_min(ppc);
    let lambda_le = min_eigenvalue_of_symmetric_part(le);
    let rate_eig = convergence_rate_margin(le, &phi, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for gamma in grid.values() {
        if envelope_decay_margin(le, &phi, Some(gamma), ppc.eps_bar()) < -PSD_TOLERANCE {
            continue;
        }
        if lambda_le - k_g * k_g / (2.0 * gamma) < -PSD_TOLERANCE {
            continue;
        }
        let kappa = 0.5 * rate_eig.min(noise_robustness_margin(le, &phi, gamma, 0.0, k_g));
        if kappa > 0.0 && best.is_none_or(|(_, k)| kappa > k) {
            best = Some((gamma, kappa));
        }
    }
    best.map(|(gamma, kappa)| {
        let mut report = worst_case_report(graph, ppc, gamma, kappa, k_g);
        report.entries.retain(|e| e.mode != CheckMode::WorstCase || e.name != ConditionName::EnvelopeDecay);
        SearchOutcome { gamma, kappa, report }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppc::PerformanceFunction;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_edge(rho0: f64, eps: f64) -> (Graph, PpcBank) {
        let pf = PerformanceFunction::new(rho0, 0.1, eps).unwrap();
        (Graph::path(2).unwrap(), PpcBank::uniform(pf, 1))
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-10
    }

    #[test]
    fn almost_sure_margin_cases() {
        let star = reference::graph();
        let e = check_almost_sure(&star, 1.0);
        assert!(close(e.margin, 0.5) && e.pass());
        let p2 = Graph::path(2).unwrap();
        let e = check_almost_sure(&p2, 2.0);
        assert_eq!((e.margin, e.status), (0.0, Status::Fail));
        assert_eq!(check_almost_sure(&p2, 0.0).margin, 2.0);
        let triangle = Graph::new(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        assert_eq!(check_almost_sure(&triangle, 0.0).status, Status::NotApplicable);
    }

    #[test]
    fn envelope_decay_on_reference() {
        let (g, ppc) = (reference::graph(), reference::ppc(1.5));
        let conservative = check_envelope_decay(&g, &ppc, 4.0, CheckMode::WorstCase);
        assert!(close(conservative.margin, 1.16 - 1.5));
        assert_eq!(conservative.status, Status::Fail);
        // L_e (1 + 4 * 2.5 + 0.16) - 1.5 I
        let retained = check_envelope_decay(&g, &ppc, 4.0, CheckMode::WorstCaseRetained);
        assert!(close(retained.margin, 11.16 - 1.5));
        assert!(retained.pass());
    }

    #[test]
    fn envelope_decay_scalar_and_noiseless_cases() {
        let (g, ppc) = single_edge(2.0, 1.0);
        let e = check_envelope_decay(&g, &ppc, 1.0, CheckMode::WorstCaseRetained);
        assert!(close(e.margin, 5.0) && e.pass());
        let le = reference::graph().edge_laplacian().clone();
        assert!(envelope_decay_margin(&le, &[0.4; 5], None, 0.0) >= 0.0);
    }

    #[test]
    fn convergence_rate_cases() {
        let (g, ppc) = (reference::graph(), reference::ppc(1.5));
        let e = check_convergence_rate(&g, &ppc, 0.39);
        assert!(close(e.margin, -0.38));
        assert_eq!(e.status, Status::Fail);
        assert!(check_convergence_rate(&g, &ppc, 0.0).pass());
        let (g, ppc) = single_edge(2.0, 1.0);
        let e = check_convergence_rate(&g, &ppc, 0.5);
        assert!(close(e.margin, 1.0) && e.pass());
    }

    #[test]
    fn noise_robustness_cases() {
        let (g, ppc) = (reference::graph(), reference::ppc(1.5));
        let e = check_noise_robustness(&g, &ppc, 4.0, 0.39, 1.0);
        assert!(close(e.margin, 0.64 - 0.78));
        assert_eq!(e.status, Status::Fail);
        let (g, ppc) = single_edge(2.0, 1.0);
        let e = check_noise_robustness(&g, &ppc, 2.0, 0.5, 1.0);
        assert!(close(e.margin, 3.25 - 1.0) && e.pass());
        // tiny gamma makes the Φ² coefficient negative
        let e = check_noise_robustness(&g, &ppc, 0.1, 0.5, 1.0);
        assert_eq!(e.status, Status::Indeterminate);
        let le = reference::graph().edge_laplacian().clone();
        let phi = [0.7, 1.3, 0.2, 2.0, 0.9];
        let plain = convergence_rate_margin(&(&le * diag(&phi.map(|p| 1.0 + p * p))), &[1.0; 5], 0.3);
        assert!(close(noise_robustness_margin(&le, &phi, 4.0, 0.3, 0.0), plain));
    }

    #[test]
    fn worst_case_report_lists_everything() {
        let r = worst_case_report(&reference::graph(), &reference::ppc(1.5), 4.0, 0.39, 1.0);
        assert_eq!(r.entries.len(), 5);
        assert!(!r.all_pass());
        assert!(r.to_csv().starts_with("name,mode,margin,pass\n"));
        assert_eq!(r.to_csv().lines().count(), 6);
    }

    #[test]
    fn constant_worst_case_trajectory_matches_static_checks() {
        let (g, ppc) = (reference::graph(), reference::ppc(1.5));
        let le = g.edge_laplacian();
        let phi = phi_min(&ppc);
        let traj = TrajectoryMargins::at(le, &phi, 4.0, 0.39, 1.0, 1.5).min(TrajectoryMargins::at(le, &phi, 4.0, 0.39, 1.0, 1.5));
        assert_eq!(traj.envelope_decay, check_envelope_decay(&g, &ppc, 4.0, CheckMode::WorstCaseRetained).margin);
        assert_eq!(traj.convergence_rate, check_convergence_rate(&g, &ppc, 0.39).margin);
        assert_eq!(traj.noise_robustness, check_noise_robustness(&g, &ppc, 4.0, 0.39, 1.0).margin);
    }

    #[test]
    fn margins_grow_with_phi_when_phi_terms_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        for _ in 0..500 {
            let n = rng.random_range(2..=12);
            let g = Graph::random_tree(n, &mut rng).unwrap();
            let le = g.edge_laplacian();
            let phi: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.3..3.0)).collect();
            let phi2: Vec<f64> = phi.iter().map(|p| 2.0 * p).collect();
            let (gamma, kappa, kg) = (rng.random_range(0.5..8.0), 0.2, rng.random_range(0.0..1.0));
            let sq = diag(&phi.iter().map(|p| p * p).collect::<Vec<_>>());
            let c = kg * kg / (2.0 * gamma);
            let a2_coeff = (le - DMatrix::identity(n - 1, n - 1) * c) * &sq;
            if min_eigenvalue_of_symmetric_part(&a2_coeff) >= 0.0 {
                checked += 1;
                assert!(
                    noise_robustness_margin(le, &phi2, gamma, kappa, kg)
                        >= noise_robustness_margin(le, &phi, gamma, kappa, kg) - 1e-9
                );
            }
            if min_eigenvalue_of_symmetric_part(&(diag(&phi) * le)) >= 0.0 {
                assert!(convergence_rate_margin(le, &phi2, kappa) >= convergence_rate_margin(le, &phi, kappa) - 1e-9);
            }
        }
        assert!(checked > 50, "{checked}");
    }

    #[test]
    fn search_cases() {
        let (g, ppc) = single_edge(2.0, 1.0);
        let best = search_gamma_kappa(&g, &ppc, 0.0, GammaGrid::default()).unwrap();
        assert!(close(best.kappa, 1.0));
        assert!(best.report.all_pass());

        assert!(search_gamma_kappa(&g, &ppc, 100.0, GammaGrid::default()).is_none());

        let best = search_gamma_kappa(&reference::graph(), &reference::ppc(1.5), 1.0, GammaGrid::default()).unwrap();
        assert!(best.kappa > 0.0);
        assert!(close(best.kappa, 0.2));
        assert!(best.report.all_pass(), "{:?}", best.report);
        let again = search_gamma_kappa(&reference::graph(), &reference::ppc(1.5), 1.0, GammaGrid::default()).unwrap();
        assert_eq!(best, again);
    }
}
