use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:.3e})")]
    NotHurwitz { abscissa: f64 },

    #[error("linear system is numerically singular: {0}")]
    SingularSystem(String),

    #[error("initial gain is not stabilizing (spectral abscissa {abscissa:.3e})")]
    NotStabilizing { abscissa: f64 },

    #[error("pair is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("closed-loop matrix is singular; equilibrium undefined")]
    SingularClosedLoop,

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("window [{start:.6}, {end:.6}] overruns the segment end {segment_end:.6}")]
    WindowOverrun { start: f64, end: f64, segment_end: f64 },

    #[error("state diverged at t = {t:.6} (|xi| = {norm:.3e})")]
    Divergence { t: f64, norm: f64 },

    #[error("rank condition violated: rank {achieved} < required {required}")]
    RankDeficient { achieved: usize, required: usize },

    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("missing artifact: {0}")]
    MissingArtifacts(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::InvalidParameter(_)
            | Error::DimensionMismatch(_)
            | Error::InfeasibleSchedule(_)
            | Error::NotStabilizable(_)
            | Error::NotStabilizing { .. } => 2,
            Error::Io(_) | Error::MissingArtifacts(_) => 4,
            _ => 3,
        }
    }

    /// Short machine-readable tag for error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NotHurwitz { .. } => "not_hurwitz",
            Error::SingularSystem(_) => "singular_system",
            Error::NotStabilizing { .. } => "not_stabilizing",
            Error::NotStabilizable(_) => "not_stabilizable",
            Error::NoConvergence { .. } => "no_convergence",
            Error::SingularClosedLoop => "singular_closed_loop",
            Error::InsufficientHistory(_) => "insufficient_history",
            Error::WindowOverrun { .. } => "window_overrun",
            Error::Divergence { .. } => "divergence",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::InfeasibleSchedule(_) => "infeasible_schedule",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Parse { .. } => "parse_error",
            Error::Validation(_) => "validation_error",
            Error::MissingArtifacts(_) => "missing_artifacts",
            Error::Io(_) => "io_error",
        }
    }
}
