use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrimotError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("tokenization error: {0}")]
    Tokenize(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numerical abort: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TrimotError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        TrimotError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrimotError>;
