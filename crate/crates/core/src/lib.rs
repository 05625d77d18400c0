//! Measure-valued polynomial and affine diffusions on a finite grid.
//!
//! The state is a non-negative measure `ν = Σ c_i δ_{x_i}` on grid points
//! `x_1 < … < x_m`. Modules:
//!
//! - [`measures`]: polynomials `Σ_k ⟨g_k, ν^k⟩` with symmetric coefficient tensors.
//! - [`generator`]: the operator spec, admissibility checks, the generator,
//!   its dual on coefficients, the carré-du-champ and a maximum principle probe.
//! - [`moments`]: conditional moments through the linear coefficient ODE.
//! - [`affine`]: Riccati equations and Laplace transforms when `Q₂ ≡ 0`.
//! - [`simulate`]: Euler Monte Carlo of the weight process, used as an oracle.
//! - [`continuum`]: discretization of operators on an interval and presets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affine;
pub mod continuum;
pub mod error;
pub mod generator;
pub mod linalg;
pub mod measures;
pub mod moments;
pub mod random;
pub mod simulate;

pub(crate) mod ode;

pub use nalgebra;

pub use error::{Error, Result};
pub use generator::{OperatorSpec, ValidationReport};
pub use measures::{Grid, MeasureVec, PolyRep, SymCoeff};

use serde::Serialize;

/// Engine value against a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct ComparisonReport {
    pub engine: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub z: f64,
}

impl ComparisonReport {
    pub fn new(engine: f64, mc_mean: f64, mc_se: f64) -> Self {
        let diff = mc_mean - engine;
        let z = if mc_se > 0.0 {
            diff / mc_se
        } else if diff.abs() <= 1e-12 * engine.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        };
        Self {
            engine,
            mc_mean,
            mc_se,
            z,
        }
    }

    pub fn within(&self, sigmas: f64) -> bool {
        self.z.abs() <= sigmas
    }
}
