use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("landmark {landmark} has no annotated instance in the dataset")]
    LandmarkNeverAnnotated { landmark: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("normal equations are singular; use a positive ridge value")]
    SingularSystem,

    #[error("{0} landmarks exceed the exhaustive expectation threshold {1}; use the Monte Carlo path")]
    ExhaustiveTooLarge(usize, usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("degenerate image: width and height must be positive")]
    DegenerateImage,

    #[error("{path}:{line}: {message}")]
    DatasetParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
