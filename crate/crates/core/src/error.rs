//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid plant: {0}")]
    InvalidPlant(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("pair (A, B) is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("ill-conditioned linear solve (condition estimate {0:.3e})")]
    IllConditioned(f64),

    #[error("matrix is not Hurwitz (largest real part {0:.3e})")]
    NotHurwitz(f64),

    #[error("mapping is singular (condition estimate {0:.3e})")]
    Singular(f64),

    #[error("infeasible initialization: {0}")]
    InfeasibleInit(String),

    #[error("Gramian is singular: {0}")]
    GramianSingular(String),

    #[error("enumeration budget exceeded: {count} decompositions > budget {budget}")]
    BudgetExceeded { count: u128, budget: u128 },

    #[error("every decomposition yields an unstable closed loop")]
    AllUnstable,

    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),

    #[error("sampler exhausted {0} retries")]
    ExhaustedRetries(usize),

    #[error("goal is not an equilibrium (|f(x_d, u_d)|_inf = {0:.3e})")]
    NonEquilibriumGoal(f64),

    #[error("value table diverged (|V| exceeded {0:.1e})")]
    DivergedValue(f64),

    #[error("policy iteration did not converge within {0} iterations")]
    NonConvergence(usize),

    #[error("non-finite state encountered at t = {0:.3}")]
    NonFinite(f64),

    #[error("reference value must be positive, got {0}")]
    NonPositiveReference(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("[{phase}] {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline phase it came from.
    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
