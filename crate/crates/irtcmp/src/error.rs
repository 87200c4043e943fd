use thiserror::Error;

/// Errors produced by data ingestion, model validation, estimation, and the
/// comparison tests.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at row {row}, column {col}: {msg}")]
    CsvCell { row: usize, col: usize, msg: String },

    #[error("item {item} has fewer than 2 structural categories")]
    DegenerateItem { item: usize },

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameters for item {item}: {msg}")]
    ParameterValidity { item: usize, msg: String },

    #[error("data shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("likelihood vanished for person {person} (all quadrature mass zero)")]
    ZeroLikelihood { person: usize },

    #[error("M-step failed for parameter block {block}: {msg}")]
    MStepFailure { block: usize, msg: String },

    #[error("fit did not converge and the requested operation needs a converged fit")]
    NotConverged,

    #[error("observed information matrix is numerically singular")]
    SingularInformation,

    #[error("eigenvalues of the weight matrix have non-negligible imaginary parts (max {0:.3e})")]
    ComplexEigenvalues(f64),

    #[error("casewise log-likelihood vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("models are not certified as nested: {0}")]
    NotNested(String),

    #[error("degenerate comparison: {0}")]
    Degenerate(String),

    #[error("invalid simulation design: {0}")]
    InvalidDesign(String),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
