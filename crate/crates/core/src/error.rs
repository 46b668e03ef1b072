use thiserror::Error;

/// Errors produced by the formation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("agents {0} and {1} are coincident")]
    CoincidentAgents(usize, usize),

    #[error("argument {value} outside spline domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("invalid formation: {0}")]
    InvalidFormation(String),

    #[error("invalid spline grid: {0}")]
    InvalidGrid(String),

    #[error("range grid must contain 0 as a knot")]
    GridMissingZero,

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("guard failure at t={t}: agents {i} and {j} within {distance:e} of each other")]
    GuardFailure {
        t: f64,
        i: usize,
        j: usize,
        distance: f64,
    },

    #[error("integrator step size underflow at t={0}")]
    StepSizeUnderflow(f64),

    #[error("non-finite state encountered at t={0}")]
    NonFinite(f64),

    #[error("initial parameters violate constraints (max violation {0:e})")]
    InfeasibleStart(f64),

    #[error("quadratic subproblem failed: {0}")]
    Qp(String),

    #[error("scenario sampling exhausted after {0} attempts")]
    RejectionExhausted(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::CoincidentAgents(..) => "coincident_agents",
            Error::Domain { .. } => "domain",
            Error::InvalidFormation(_) => "invalid_formation",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::GridMissingZero => "grid_missing_zero",
            Error::Degenerate(_) => "degenerate",
            Error::InvalidConfig(_) => "invalid_config",
            Error::GuardFailure { .. } => "guard_failure",
            Error::StepSizeUnderflow(_) => "step_size_underflow",
            Error::NonFinite(_) => "non_finite",
            Error::InfeasibleStart(_) => "infeasible_start",
            Error::Qp(_) => "qp",
            Error::RejectionExhausted(_) => "rejection_exhausted",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
