//! The six-agent reference setup used by the acceptance tests, the shipped
//! config and `reproduce-paper`.
//!
//! Star graph centred at agent 1, diffusion `e^{-0.1|x|} sin(x)` with `k_g = 1`,
//! envelopes `4.9 e^{-eps t} + 0.1` on every edge.

use nalgebra::DVector;

use crate::dynamics::{DiffusionFunction, DiffusionKind, NoiseMode, SystemModel};
use crate::graph::Graph;
use crate::ppc::{PerformanceFunction, PpcBank};

pub const AGENTS: usize = 6;
pub const RHO0: f64 = 5.0;
pub const RHO_INF: f64 = 0.1;
pub const EPS_SLOW: f64 = 1.5;
pub const EPS_FAST: f64 = 10.0;
pub const GAMMA: f64 = 4.0;
pub const KAPPA: f64 = 0.39;
pub const XBAR0: [f64; 5] = [-4.9, 1.0, -3.0, -1.5, 4.5];

pub fn graph() -> Graph {
    Graph::star(AGENTS).expect("star is valid")
}

pub fn diffusion() -> DiffusionFunction {
    DiffusionFunction::new(DiffusionKind::ExpSin { a: 0.1, b: 1.0 })
        .and_then(|g| g.with_lipschitz(1.0))
        .expect("k_g = 1 bounds the slope")
}

pub fn ppc(eps: f64) -> PpcBank {
    let pf = PerformanceFunction::new(RHO0, RHO_INF, eps).expect("valid envelope");
    PpcBank::uniform(pf, AGENTS - 1)
}

pub fn reference_model(eps: f64) -> SystemModel {
    SystemModel::new(graph(), diffusion(), NoiseMode::Shared, ppc(eps)).expect("sizes agree")
}

/// Agent 1 at the origin, `x_k = -xbar_k` for the leaves.
pub fn x0() -> DVector<f64> {
    DVector::from_iterator(AGENTS, std::iter::once(0.0).chain(XBAR0.iter().map(|v| -v)))
}
