use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{context}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{context}: non-finite value {value} at flat index {index}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("pose normalization degenerate: (c, s) = (0, 0)")]
    NormalizationDegenerate,

    #[error("{context}: {message}")]
    Invalid {
        context: &'static str,
        message: String,
    },

    #[error("training aborted: non-finite loss at stage {stage:?}, epoch {epoch}, batch {batch} (rotation={rotation_loss}, detection={detection_loss})")]
    NanLoss {
        stage: String,
        epoch: usize,
        batch: usize,
        rotation_loss: f64,
        detection_loss: f64,
    },

    #[error("io error in {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        CoreError::Invalid {
            context,
            message: message.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            context: context.into(),
            source,
        }
    }
}
