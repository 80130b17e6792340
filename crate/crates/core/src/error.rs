use thiserror::Error;

#[derive(Debug, Error)]
pub enum GapError {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("span [{start}, {end}] out of range for {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("missing prior for instance `{0}`")]
    MissingPrior(String),
    #[error("oracle did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing artifact `{0}`")]
    MissingArtifact(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GapError {
    /// Short machine-readable class used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            GapError::Parse { .. } => "parse",
            GapError::UnknownToken(_) => "unknown_token",
            GapError::SpanOutOfRange { .. } => "span_out_of_range",
            GapError::Shape(_) => "shape",
            GapError::NonFinite(_) => "non_finite",
            GapError::InvalidArgument(_) => "invalid_argument",
            GapError::Empty(_) => "empty",
            GapError::MissingPrior(_) => "missing_prior",
            GapError::NoConvergence { .. } => "no_convergence",
            GapError::Generation(_) => "generation",
            GapError::Format(_) => "format",
            GapError::MissingArtifact(_) => "missing_artifact",
            GapError::Config(_) => "config",
            GapError::Verification(_) => "verification",
            GapError::Io(_) => "io",
            GapError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = GapError> = std::result::Result<T, E>;
