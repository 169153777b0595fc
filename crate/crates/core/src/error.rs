use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),

    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("output node has {0} elements; select a scalar component")]
    NonScalarOutput(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training loss became non-finite at step {step}")]
    Diverged { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{0} requires both classes to be present")]
    SingleClass(&'static str),

    #[error("bootstrap could not draw a valid resample after {0} retries")]
    ResampleRetries(usize),

    #[error("logistic fit did not converge: gradient norm {grad_norm:.3e} after {iterations} iterations")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::UnknownLeaf(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
