//! Per-layer low-rank solvers.
//!
//! All three solvers produce a [`Decomposition`] `(P, Q, b)` such that the
//! layer response `W·x` is approximated by `P·Qᵀ·W·x + b`:
//!
//! * [`solve_linear`]: PCA on centered responses, `M = U_{d′}·U_{d′}ᵀ`.
//! * [`solve_nonlinear`]: minimizes the error after the nonlinearity by
//!   alternating a reduced-rank regression for `(M, b)` with an elementwise
//!   update of auxiliary responses `z`, under an increasing penalty `λ`.
//! * [`solve_asymmetric`]: the same alternation, but regressing the true
//!   responses `W·x` from responses to approximated inputs `W·x̂`.

mod build;
mod solve;
mod zstep;

pub use build::build_layers;
pub use solve::{
    nonlinear_error, solve_asymmetric, solve_linear, solve_nonlinear, solve_regression,
};
pub use zstep::{solve_z, solve_z_for, solve_z_with};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Linear,
    Nonlinear,
    Asymmetric,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SolverKind::Linear),
            "nonlinear" => Ok(SolverKind::Nonlinear),
            "asymmetric" => Ok(SolverKind::Asymmetric),
            _ => Err(Error::Input(format!("unknown solver {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub lambda: f64,
    pub iterations: usize,
}

/// Penalty schedule for the alternating solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSchedule {
    pub stages: Vec<Stage>,
}

impl Default for SolverSchedule {
    /// 25 iterations at λ = 0.01, then 25 at λ = 1.
    fn default() -> Self {
        SolverSchedule {
            stages: vec![
                Stage {
                    lambda: 0.01,
                    iterations: 25,
                },
                Stage {
                    lambda: 1.0,
                    iterations: 25,
                },
            ],
        }
    }
}

impl SolverSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Input("solver schedule has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.lambda > 0.0 && s.lambda.is_finite()) {
                return Err(Error::Input(format!("stage {i}: λ must be positive, got {}", s.lambda)));
            }
            if s.iterations == 0 {
                return Err(Error::Input(format!("stage {i}: needs at least one iteration")));
            }
        }
        if self.stages.windows(2).any(|w| w[1].lambda <= w[0].lambda) {
            return Err(Error::Input("λ must increase strictly from stage to stage".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub schedule: SolverSchedule,
    /// Relative ridge: `ridge · trace(YYᵀ) / d` is added to `YYᵀ`.
    pub ridge: f64,
    pub activation: Activation,
    /// Stop a stage once the relative objective change of one iteration falls
    /// below this value. Off by default.
    pub early_exit: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            schedule: SolverSchedule::default(),
            ridge: 1e-6,
            activation: Activation::Relu,
            early_exit: None,
        }
    }
}

/// Objective values around one outer iteration of the alternating solver,
/// all evaluated at the stage's λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: usize,
    pub lambda: f64,
    /// Before the z-update; absent for the very first iteration, where no
    /// `z` exists yet.
    pub before: Option<f64>,
    pub after_z: f64,
    pub after_mb: f64,
}

/// Low-rank replacement for one layer: `M = P·Qᵀ`, new bias `b`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub layer_id: String,
    pub d_prime: usize,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub solver: SolverKind,
    /// Relaxed objective (unnormalized sum over samples) after each outer
    /// iteration; empty for the linear solver.
    pub objective_trace: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
}

impl Decomposition {
    pub fn m(&self) -> DMatrix<f64> {
        &self.p * self.q.transpose()
    }

    /// Applies `M·y + b` to every column of `y`.
    pub fn apply(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.p * (self.q.transpose() * y);
        for mut col in out.column_iter_mut() {
            col += &self.b;
        }
        out
    }
}
