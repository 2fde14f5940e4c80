//! Simulation and verification of stochastic multi-agent consensus under
//! prescribed-performance control.

// `!(x <= limit)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod conditions;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod ppc;
pub mod reference;
pub mod sim;

pub use control::Controller;
pub use dynamics::{AugmentedState, DiffusionFunction, DiffusionKind, NoiseMode, SystemModel};
pub use graph::Graph;
pub use ppc::{PerformanceFunction, PpcBank};
