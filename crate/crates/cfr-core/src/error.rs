use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the numeric kernels, the model, and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("activation cache invalid: {0}")]
    CacheInvalid(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
