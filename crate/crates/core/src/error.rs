//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by simulation, synthesis, solvers, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible dimensions between system, policy, cost, or config parts.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Invalid configuration or parameter value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// State norm crossed the divergence guard during simulation.
    #[error("divergence at round {round}: ||x|| = {norm:.6e} exceeds guard {guard:.6e}")]
    Divergence { round: usize, norm: f64, guard: f64 },

    /// The closed loop A - B K has spectral radius >= 1.
    #[error("closed loop is not stable: spectral radius {rho:.12}")]
    NotStabilizing { rho: f64 },

    /// Eigenbasis of the closed loop is too ill-conditioned to certify.
    #[error(
        "closed-loop eigenbasis is numerically defective (cond = {cond:.3e}); \
         perturb the system slightly to split repeated eigenvalues"
    )]
    DefectiveEigenbasis { cond: f64 },

    /// Fixed-point synthesis failed to converge.
    #[error("Riccati iteration did not converge within {sweeps} sweeps")]
    SynthesisDiverged { sweeps: usize },

    /// Numerical failure inside a solver or decomposition.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// File or serialization problem.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Config deserialization problem.
    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
