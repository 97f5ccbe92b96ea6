use thiserror::Error;

/// Errors raised by the solvers.
///
/// Variants fall into two families: configuration problems detected before
/// any numerical work starts ([`PiaError::is_validation`]), and numerical
/// faults raised mid-computation.
#[derive(Debug, Error)]
pub enum PiaError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("action {action:?} is not a point of the action grid")]
    ActionOutsideGrid { action: Vec<f64> },

    #[error("coefficient `{coefficient}` returned a non-finite value at t={t}")]
    NonFinite { coefficient: &'static str, t: f64 },

    #[error("coefficient `{coefficient}` exceeds its declared bound {bound} (norm {norm}) at t={t}")]
    BoundViolated {
        coefficient: &'static str,
        bound: f64,
        norm: f64,
        t: f64,
    },

    #[error("no grid action has a volatility level within {tol} of the requested level")]
    EmptyLevelSet { tol: f64 },

    #[error("simulation failed on path {path}, step {step}: {reason}")]
    Simulation {
        path: usize,
        step: usize,
        reason: String,
    },

    #[error("regression failed at time step {step}: {reason}")]
    Basis { step: usize, reason: String },

    #[error("backward solver unstable at step {step}: max |y| = {observed} exceeds limit {limit}")]
    Instability {
        step: usize,
        observed: f64,
        limit: f64,
    },

    #[error("Cole-Hopf iterate lost positivity at time layer {layer}, node {node} (u = {value})")]
    Positivity {
        layer: usize,
        node: usize,
        value: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown benchmark `{name}`; registered: {known}")]
    UnknownBenchmark { name: String, known: String },

    #[error("oracle unstable: refinement changed the value by {change}, limit {limit}")]
    OracleUnstable { change: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PiaError {
    /// True for errors that are detectable before any computation runs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PiaError::Config(_) | PiaError::UnknownBenchmark { .. } | PiaError::Json(_)
        )
    }

    pub fn config(msg: impl Into<String>) -> Self {
        PiaError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, PiaError>;
