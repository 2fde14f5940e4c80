//! External inputs for the consensus protocol `u = -L x + v`.
//!
//! Both prescribed-performance laws feed back a per-edge signal
//! `h_k = phi_k² xbar_k + c xi_k` through the incidence matrix, `v = -D h`;
//! the mean-square law uses `c = 1`, the almost-sure law `c = 0`.
//! Agent `i` only needs the edges it belongs to, so the per-agent form
//! `v_i = -Σ_{k ∋ i} D[i][k] h_k` is what a distributed implementation runs.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{AugmentedState, SystemModel};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Controller {
    /// `v = 0`: the bare protocol, envelopes only monitored.
    #[default]
    None,
    /// `v = -D Φ² xbar - D xi`; consensus in expectation under the decay conditions.
    MeanSquare,
    /// `v = -D Φ² xbar`; almost-sure consensus when `L_e - ½ k_g² I ≻ 0`.
    AlmostSure,
}

impl Controller {
    pub const ALL: [Controller; 3] = [Controller::None, Controller::MeanSquare, Controller::AlmostSure];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::MeanSquare => "thm1",
            Self::AlmostSure => "thm2",
        }
    }

    /// Whether the law needs the envelope terms (and hence a tree and a feasible start).
    pub fn uses_envelope(self) -> bool {
        self != Self::None
    }

    /// Weight `c` of `xi_k` in the edge feedback.
    pub fn xi_weight(self) -> f64 {
        match self {
            Self::MeanSquare => 1.0,
            Self::None | Self::AlmostSure => 0.0,
        }
    }

    /// Edge feedback `h_k`; zero for [`Controller::None`].
    pub fn edge_feedback(self, phi: f64, xbar: f64, xi: f64) -> f64 {
        match self {
            Self::None => 0.0,
            _ => phi * phi * xbar + self.xi_weight() * xi,
        }
    }

    /// Per-agent evaluation: each agent sums over its incident edges only.
    pub fn control(self, model: &SystemModel, state: &AugmentedState) -> DVector<f64> {
        let graph = model.graph();
        let h: Vec<f64> = state
            .edge_states()
            .iter()
            .map(|e| self.edge_feedback(e.phi, e.xbar, e.xi))
            .collect();
        apply_incidence(graph, &h)
    }

    /// Stacked matrix form, `-D Φ² xbar - c D xi`.
    pub fn control_stacked(self, model: &SystemModel, state: &AugmentedState) -> DVector<f64> {
        let d = model.graph().incidence();
        if self == Self::None {
            return DVector::zeros(d.nrows());
        }
        let phi2 = DMatrix::from_diagonal(&state.phi().map(|p| p * p));
        -(d * phi2 * &state.xbar) - d * state.xi() * self.xi_weight()
    }
}

/// `v_i = -Σ_{k ∋ i} D[i][k] h_k`.
pub(crate) fn apply_incidence(graph: &Graph, h: &[f64]) -> DVector<f64> {
    DVector::from_fn(graph.vertex_count(), |i, _| {
        -graph
            .incident_edges(i)
            .expect("vertex in range")
            .iter()
            .map(|e| e.sign * h[e.edge])
            .sum::<f64>()
    })
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown controller `{0}` (expected none, thm1 or thm2)")]
pub struct UnknownController(pub String);

impl FromStr for Controller {
    type Err = UnknownController;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownController(s.to_owned()))
    }
}

/// The consensus protocol `u_i = -Σ_{j ∈ N_i} (x_i - x_j) + v_i`, summed over neighbours.
pub fn base_protocol(graph: &Graph, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(graph.vertex_count(), |i, _| {
        let coupling: f64 = graph
            .incident_edges(i)
            .expect("vertex in range")
            .iter()
            .map(|e| {
                let (h, t) = graph.edges()[e.edge];
                let j = if h == i { t } else { h };
                x[i] - x[j]
            })
            .sum();
        v[i] - coupling
    })
}
