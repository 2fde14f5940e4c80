//! Prescribed-performance envelopes and the error transformation.
//!
//! Each edge `k` carries an exponential envelope
//! `rho_k(t) = (rho0 - rho_inf) e^{-eps t} + rho_inf`. The relative position is
//! normalised to the modulating error `xhat = xbar / rho(t) ∈ (-1, 1)` and mapped
//! to the transformed error `xi = ln((1 + xhat) / (1 - xhat))`, which is finite
//! exactly while the edge stays inside its envelope.

use thiserror::Error;

/// States with `|xhat| > 1 - BREACH_TOLERANCE` count as outside the envelope.
pub const BREACH_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PpcError {
    #[error("time {0} is negative")]
    NegativeTime(f64),
    #[error("invalid performance function: {0}")]
    InvalidParameters(String),
    #[error("modulating error {xhat} is outside the open unit interval")]
    OutsideEnvelope { xhat: f64 },
}

/// An edge left its envelope: `|xbar| >= rho(t)` (up to [`BREACH_TOLERANCE`]).
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("edge {edge} left its envelope at t={t}: xbar={xbar}, rho={rho}")]
pub struct EnvelopeBreach {
    pub edge: usize,
    pub t: f64,
    pub xbar: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerformanceFunction {
    rho0: f64,
    rho_inf: f64,
    eps: f64,
}

impl PerformanceFunction {
    pub fn new(rho0: f64, rho_inf: f64, eps: f64) -> Result<Self, PpcError> {
        if !(rho_inf > 0.0 && rho0 > rho_inf && rho0.is_finite()) {
            return Err(PpcError::InvalidParameters(format!(
                "need rho0 > rho_inf > 0, got rho0={rho0}, rho_inf={rho_inf}"
            )));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(PpcError::InvalidParameters(format!("need eps > 0, got {eps}")));
        }
        Ok(Self { rho0, rho_inf, eps })
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn rho_inf(&self) -> f64 {
        self.rho_inf
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn check_time(t: f64) -> Result<(), PpcError> {
        if t < 0.0 || t.is_nan() {
            Err(PpcError::NegativeTime(t))
        } else {
            Ok(())
        }
    }

    pub fn rho(&self, t: f64) -> Result<f64, PpcError> {
        Self::check_time(t)?;
        Ok((self.rho0 - self.rho_inf) * (-self.eps * t).exp() + self.rho_inf)
    }

    pub fn rho_dot(&self, t: f64) -> Result<f64, PpcError> {
        Self::check_time(t)?;
        Ok(-self.eps * (self.rho0 - self.rho_inf) * (-self.eps * t).exp())
    }

    /// Normalised envelope decay `alpha = -rho_dot / rho`, always in `[0, eps)`.
    pub fn alpha(&self, t: f64) -> Result<f64, PpcError> {
        Ok(-self.rho_dot(t)? / self.rho(t)?)
    }

    /// Normalised Jacobian of the transformation, `(1/rho)(2/(1 - xhat²))`.
    pub fn phi(&self, xhat: f64, t: f64) -> Result<f64, PpcError> {
        check_inside(xhat)?;
        Ok(2.0 / (self.rho(t)? * (1.0 - xhat * xhat)))
    }

    /// Lower bound of `phi` over all admissible `(xhat, t)`.
    pub fn phi_min(&self) -> f64 {
        2.0 / self.rho0
    }
}

fn check_inside(xhat: f64) -> Result<(), PpcError> {
    // Negated comparison so NaN is also rejected.
    if !(xhat.abs() <= 1.0 - BREACH_TOLERANCE) {
        return Err(PpcError::OutsideEnvelope { xhat });
    }
    Ok(())
}

/// `T(xhat) = ln((1 + xhat)/(1 - xhat)) = 2 atanh(xhat)`, as `ln(1 + xhat) - ln(1 - xhat)`,
/// which stays accurate near `±1` where `1 - |xhat|` is exact.
pub fn transform(xhat: f64) -> Result<f64, PpcError> {
    check_inside(xhat)?;
    Ok(xhat.ln_1p() - (-xhat).ln_1p())
}

/// `xhat = (e^xi - 1)/(e^xi + 1) = tanh(xi / 2)`; saturates to ±1 without overflow.
pub fn inverse_transform(xi: f64) -> f64 {
    (0.5 * xi).tanh()
}

/// Every prescribed-performance quantity of one edge at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeState {
    pub t: f64,
    pub xbar: f64,
    pub rho: f64,
    pub xhat: f64,
    pub xi: f64,
    pub phi: f64,
    pub alpha: f64,
}

pub fn edge_state(pf: &PerformanceFunction, xbar: f64, t: f64) -> Result<EdgeState, PpcError> {
    let rho = pf.rho(t)?;
    let xhat = xbar / rho;
    let xi = transform(xhat)?;
    Ok(EdgeState {
        t,
        xbar,
        rho,
        xhat,
        xi,
        phi: 2.0 / (rho * (1.0 - xhat * xhat)),
        alpha: pf.alpha(t)?,
    })
}

/// One performance function per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcBank {
    functions: Vec<PerformanceFunction>,
    eps_bar: f64,
}

impl PpcBank {
    pub fn new(functions: Vec<PerformanceFunction>) -> Self {
        let eps_bar = functions.iter().map(|f| f.eps).fold(0.0, f64::max);
        Self { functions, eps_bar }
    }

    pub fn uniform(pf: PerformanceFunction, edges: usize) -> Self {
        Self::new(vec![pf; edges])
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn functions(&self) -> &[PerformanceFunction] {
        &self.functions
    }

    pub fn get(&self, edge: usize) -> &PerformanceFunction {
        &self.functions[edge]
    }

    /// `max_k eps_k`.
    pub fn eps_bar(&self) -> f64 {
        self.eps_bar
    }

    pub fn rho_all(&self, t: f64) -> Vec<f64> {
        self.functions
            .iter()
            .map(|f| f.rho(t.max(0.0)).expect("clamped time"))
            .collect()
    }

    /// Edge states for all edges; the first edge outside its envelope is reported.
    ///
    /// Panics on `t < 0`.
    pub fn edge_states(&self, xbar: &[f64], t: f64) -> Result<Vec<EdgeState>, EnvelopeBreach> {
        assert!(t >= 0.0, "negative time {t}");
        assert_eq!(xbar.len(), self.functions.len(), "xbar length");
        self.functions
            .iter()
            .zip(xbar)
            .enumerate()
            .map(|(edge, (pf, &x))| {
                edge_state(pf, x, t).map_err(|_| EnvelopeBreach {
                    edge,
                    t,
                    xbar: x,
                    rho: pf.rho(t).expect("non-negative time"),
                })
            })
            .collect()
    }

    /// First edge with `|xbar_k| >= rho_k(t)`, if any. No transform is evaluated.
    pub fn first_breach(&self, xbar: &[f64], t: f64) -> Option<EnvelopeBreach> {
        self.functions.iter().zip(xbar).enumerate().find_map(|(edge, (pf, &x))| {
            let rho = pf.rho(t).ok()?;
            check_inside(x / rho).err().map(|_| EnvelopeBreach { edge, t, xbar: x, rho })
        })
    }
}
