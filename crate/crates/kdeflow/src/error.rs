//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KdeflowError {
    /// Grid construction produced no points inside the domain.
    #[error("covering grid underflow: no grid point fits inside the domain at spacing {omega}")]
    GridUnderflow { omega: f64 },

    /// Two particle configurations that must agree in size do not.
    #[error("configuration size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    /// Rejection sampling gave up after too many attempts.
    #[error(
        "sampler starvation: {attempts} rejection attempts without filling the \
         configuration (acceptance rate {acceptance_rate:.2e}); the initial density \
         barely overlaps the domain"
    )]
    SamplerStarvation { attempts: u64, acceptance_rate: f64 },

    /// Concentration rate requested outside its validity range.
    #[error(
        "density deviation rate needs 0 < h < 0.9 and 0 < alpha < 1 and n >= 1, \
         got n={n}, h={h}, alpha={alpha}"
    )]
    RateOutOfRange { n: f64, h: f64, alpha: f64 },

    /// Exact interaction quadrature requested on a lattice too large to square.
    #[error(
        "exact interaction quadrature on {nodes} lattice nodes exceeds the gate of {max}; \
         use the particle-sum mode or coarsen the pitch"
    )]
    QuadratureTooLarge { nodes: usize, max: usize },

    /// A relaxed step was asked to start from an infeasible configuration.
    #[error("invalid step origin: the starting configuration has infinite energy")]
    InvalidStepOrigin,

    /// Exhaustive enumeration would exceed its candidate budget.
    #[error(
        "exhaustive oracle budget exceeded: about {candidates:.3e} candidate \
         configurations, limit {max:.3e}"
    )]
    OracleBudget { candidates: f64, max: f64 },

    /// Exact optimal transport gated to validation scale.
    #[error("exact transport restricted to validation scale: {points} support points exceeds {max}")]
    ExactOtScale { points: usize, max: usize },

    /// Anything wrong with a run configuration, with the offending key named.
    #[error("config error: {0}")]
    Config(String),

    /// A step record failed one of the descent inequalities the construction
    /// guarantees; indicates a solver bug, never a user error.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KdeflowError>;
