use thiserror::Error;

pub type Result<T, E = CkmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CkmError {
    #[error("ill-conditioned covariance (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("unsupported spherical-harmonics degree {0} (maximum is 3)")]
    UnsupportedDegree(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite loss at sample {sample_id}: {detail}")]
    NonFiniteLoss { sample_id: String, detail: String },

    #[error("placement violation: {0}")]
    PlacementViolation(String),

    #[error("invalid generation config: {0}")]
    SpecInvalid(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CkmError {
    /// Stable machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            CkmError::IllConditioned(_) => "ill_conditioned",
            CkmError::DegenerateGeometry(_) => "degenerate_geometry",
            CkmError::UnsupportedDegree(_) => "unsupported_degree",
            CkmError::ShapeMismatch(_) => "shape_mismatch",
            CkmError::EmptyInput(_) => "empty_input",
            CkmError::NonFiniteLoss { .. } => "non_finite_loss",
            CkmError::PlacementViolation(_) => "placement_violation",
            CkmError::SpecInvalid(_) => "spec_invalid",
            CkmError::InvalidConfig(_) => "invalid_config",
            CkmError::Parse { .. } => "parse_error",
            CkmError::Checkpoint(_) => "checkpoint",
            CkmError::Io(_) => "io",
        }
    }
}
