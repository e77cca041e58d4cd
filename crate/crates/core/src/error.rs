use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inconsistent partition: {0}")]
    Consistency(String),

    #[error("activation accounting: {0}")]
    Accounting(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("curve alignment: {0}")]
    Alignment(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("bundle parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        left: impl std::fmt::Display,
        right: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
