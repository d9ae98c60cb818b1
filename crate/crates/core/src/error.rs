use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Every logit in the row was the masked sentinel.
    #[error("degenerate softmax row {0}: all entries masked")]
    DegenerateRow(usize),

    #[error("config error: {0}")]
    Config(String),

    /// A step whose alpha makes the noise-free prediction undefined.
    #[error("singular step t={0}: alpha_t is zero")]
    SingularStep(usize),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
