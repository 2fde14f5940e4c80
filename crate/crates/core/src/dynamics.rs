//! Stochastic models of the multi-agent system.
//!
//! Agents are one-dimensional, `dx_i = u_i dt + g(x_i) dW`. Stacked in node
//! space with the consensus protocol `u = -L x + v` this is
//! `dx = (-L x + v) dt + G(x) dW`; multiplying by `Dᵀ` gives the edge-space model
//! `dxbar = (-L_e xbar + Dᵀ v) dt + Dᵀ G(x) dW`, and the transformed errors follow
//! `dxi = Φ_t(-L_e xbar + Dᵀ v + α_t xbar) dt + Φ_t Dᵀ G(x) dW`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::Graph;
use crate::ppc::{EdgeState, EnvelopeBreach, PpcBank};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("{what}: expected length {expected}, got {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("performance bank has {found} functions but the graph has {expected} edges")]
    BankSize { expected: usize, found: usize },
    #[error("declared Lipschitz constant {declared} is below the sampled slope {estimated}")]
    LipschitzTooSmall { declared: f64, estimated: f64 },
    #[error("invalid diffusion parameter: {0}")]
    InvalidParameter(String),
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), DynamicsError> {
    if expected == found {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch { what, expected, found })
    }
}

/// Built-in diffusion families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiffusionKind {
    Zero,
    Constant { sigma: f64 },
    Linear { sigma: f64 },
    /// `e^{-a|x|} sin(b x)`
    ExpSin { a: f64, b: f64 },
}

impl DiffusionKind {
    /// A Lipschitz bound that always holds for the family.
    fn default_lipschitz(self) -> f64 {
        match self {
            Self::Zero | Self::Constant { .. } => 0.0,
            Self::Linear { sigma } => sigma.abs(),
            // |g'| <= e^{-a|x|} sqrt(a² + b²)
            Self::ExpSin { a, b } => a.hypot(b),
        }
    }
}

/// A diffusion function `gain · g(x)` together with its declared Lipschitz constant `k_g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionFunction {
    kind: DiffusionKind,
    gain: f64,
    lipschitz: f64,
}

impl DiffusionFunction {
    pub fn new(kind: DiffusionKind) -> Result<Self, DynamicsError> {
        if let DiffusionKind::ExpSin { a, .. } = kind {
            if a < 0.0 {
                return Err(DynamicsError::InvalidParameter(format!("a must be >= 0, got {a}")));
            }
        }
        Ok(Self { kind, gain: 1.0, lipschitz: kind.default_lipschitz() })
    }

    /// `s · g` with `k_g` scaled by `|s|`.
    pub fn scaled(self, s: f64) -> Self {
        Self { gain: self.gain * s, lipschitz: self.lipschitz * s.abs(), ..self }
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// Replaces the Lipschitz constant after checking it against a sampled estimate.
    pub fn with_lipschitz(self, declared: f64) -> Result<Self, DynamicsError> {
        let estimated = self.estimate_lipschitz(50.0, 200_001);
        if !(declared >= 0.0) || estimated > declared * (1.0 + 1e-9) {
            return Err(DynamicsError::LipschitzTooSmall { declared, estimated });
        }
        Ok(Self { lipschitz: declared, ..self })
    }

    pub fn zero() -> Self {
        Self { kind: DiffusionKind::Zero, gain: 1.0, lipschitz: 0.0 }
    }

    pub fn kind(&self) -> DiffusionKind {
        self.kind
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.gain * self.shape(x)
    }

    fn shape(&self, x: f64) -> f64 {
        match self.kind {
            DiffusionKind::Zero => 0.0,
            DiffusionKind::Constant { sigma } => sigma,
            DiffusionKind::Linear { sigma } => sigma * x,
            DiffusionKind::ExpSin { a, b } => (-a * x.abs()).exp() * (b * x).sin(),
        }
    }

    /// Largest secant slope `|g(x) - g(x')| / |x - x'|` over neighbouring points of a
    /// uniform grid on `[-half_width, half_width]` and over the mirrored pairs `(x, -x)`.
    pub fn estimate_lipschitz(&self, half_width: f64, points: usize) -> f64 {
        let h = 2.0 * half_width / (points - 1) as f64;
        let grid = |i: usize| -half_width + i as f64 * h;
        let mut best = 0.0f64;
        for i in 1..points {
            let (a, b) = (grid(i - 1), grid(i));
            best = best.max((self.eval(b) - self.eval(a)).abs() / (b - a));
            if b > 0.0 {
                best = best.max((self.eval(b) - self.eval(-b)).abs() / (2.0 * b));
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// One scalar Brownian motion drives every agent.
    #[default]
    Shared,
    /// Each agent has its own Brownian motion.
    Independent,
}

#[derive(Debug, Clone)]
pub struct SystemModel {
    graph: Graph,
    diffusion: DiffusionFunction,
    noise_mode: NoiseMode,
    ppc: PpcBank,
}

impl SystemModel {
    pub fn new(
        graph: Graph,
        diffusion: DiffusionFunction,
        noise_mode: NoiseMode,
        ppc: PpcBank,
    ) -> Result<Self, DynamicsError> {
        if ppc.len() != graph.edge_count() {
            return Err(DynamicsError::BankSize { expected: graph.edge_count(), found: ppc.len() });
        }
        Ok(Self { graph, diffusion, noise_mode, ppc })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn diffusion(&self) -> &DiffusionFunction {
        &self.diffusion
    }

    pub fn noise_mode(&self) -> NoiseMode {
        self.noise_mode
    }

    pub fn ppc(&self) -> &PpcBank {
        &self.ppc
    }

    pub fn agents(&self) -> usize {
        self.graph.vertex_count()
    }

    pub fn edges(&self) -> usize {
        self.graph.edge_count()
    }

    /// Brownian dimension `w`.
    pub fn noise_dim(&self) -> usize {
        match self.noise_mode {
            NoiseMode::Shared => 1,
            NoiseMode::Independent => self.agents(),
        }
    }

    /// `-L x + v`.
    pub fn node_drift(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        check_len("x", self.agents(), x.len())?;
        check_len("v", self.agents(), v.len())?;
        Ok(v - self.graph.laplacian() * x)
    }

    /// `G(x)` as an `n × w` matrix: a column in shared mode, a diagonal otherwise.
    pub fn node_diffusion(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let g = x.map(|xi| self.diffusion.eval(xi));
        match self.noise_mode {
            NoiseMode::Shared => DMatrix::from_column_slice(g.len(), 1, g.as_slice()),
            NoiseMode::Independent => DMatrix::from_diagonal(&g),
        }
    }

    /// `-L_e xbar + Dᵀ v`.
    pub fn edge_drift(&self, xbar: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        check_len("xbar", self.edges(), xbar.len())?;
        check_len("v", self.agents(), v.len())?;
        Ok(self.graph.incidence().tr_mul(v) - self.graph.edge_laplacian() * xbar)
    }

    /// Drift and diffusion of the transformed errors.
    pub fn xi_drift_and_diffusion(
        &self,
        state: &AugmentedState,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>), DynamicsError> {
        let edge_drift = self.edge_drift(&state.xbar, v)?;
        let phi = state.phi();
        let alpha = state.alpha();
        let drift = DVector::from_fn(self.edges(), |k, _| {
            phi[k] * (edge_drift[k] + alpha[k] * state.xbar[k])
        });
        let mut diffusion = self.graph.incidence().tr_mul(&self.node_diffusion(&state.x));
        for (k, mut row) in diffusion.row_iter_mut().enumerate() {
            row *= phi[k];
        }
        Ok((drift, diffusion))
    }

    /// Drift and diffusion of `eta = [xbar; xi]`, assembled from the block form
    /// `[-L_e, 0; -Φ(L_e - α), 0] eta + [I; Φ] Dᵀ v` and `[I; Φ] Dᵀ G(x)`.
    /// The sign of `α` matches the transformed-error drift `Φ(-L_e xbar + Dᵀ v + α xbar)`.
    pub fn augmented_drift_and_diffusion(
        &self,
        state: &AugmentedState,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>), DynamicsError> {
        check_len("v", self.agents(), v.len())?;
        let m = self.edges();
        let le = self.graph.edge_laplacian();
        let phi = DMatrix::from_diagonal(&state.phi());
        let alpha = DMatrix::from_diagonal(&state.alpha());

        let mut block = DMatrix::zeros(2 * m, 2 * m);
        block.view_mut((0, 0), (m, m)).copy_from(&(-le));
        block.view_mut((m, 0), (m, m)).copy_from(&(-(&phi * (le - &alpha))));
        let mut input = DMatrix::zeros(2 * m, m);
        input.view_mut((0, 0), (m, m)).fill_with_identity();
        input.view_mut((m, 0), (m, m)).copy_from(&phi);

        let eta = state.eta();
        let dt_v = self.graph.incidence().tr_mul(v);
        let drift = block * eta + &input * dt_v;
        let diffusion = input * self.graph.incidence().tr_mul(&self.node_diffusion(&state.x));
        Ok((drift, diffusion))
    }
}

/// Node positions together with every derived edge quantity at one time.
#[derive(Debug, Clone)]
pub struct AugmentedState {
    pub t: f64,
    pub x: DVector<f64>,
    pub xbar: DVector<f64>,
    pub(crate) edges: Vec<EdgeState>,
}

impl AugmentedState {
    /// Derives `xbar = Dᵀ x` and the prescribed-performance terms.
    pub fn from_nodes(model: &SystemModel, x: DVector<f64>, t: f64) -> Result<Self, EnvelopeBreach> {
        let xbar = model.graph().relative_positions(&x);
        let edges = model.ppc().edge_states(xbar.as_slice(), t)?;
        Ok(Self { t, x, xbar, edges })
    }

    pub fn edge_states(&self) -> &[EdgeState] {
        &self.edges
    }

    pub fn xi(&self) -> DVector<f64> {
        DVector::from_iterator(self.edges.len(), self.edges.iter().map(|e| e.xi))
    }

    /// Diagonal of `Φ_t`.
    pub fn phi(&self) -> DVector<f64> {
        DVector::from_iterator(self.edges.len(), self.edges.iter().map(|e| e.phi))
    }

    /// Diagonal of `α_t`.
    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_iterator(self.edges.len(), self.edges.iter().map(|e| e.alpha))
    }

    pub fn xhat(&self) -> DVector<f64> {
        DVector::from_iterator(self.edges.len(), self.edges.iter().map(|e| e.xhat))
    }

    /// `eta = [xbar; xi]`.
    pub fn eta(&self) -> DVector<f64> {
        let m = self.edges.len();
        DVector::from_fn(2 * m, |i, _| if i < m { self.xbar[i] } else { self.edges[i - m].xi })
    }
}
