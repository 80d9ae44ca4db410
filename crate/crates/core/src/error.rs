use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid config `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("episode already finished; call reset")]
    EpisodeDone,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite loss in minibatch {0}")]
    NonFiniteLoss(usize),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error(transparent)]
    Nn(#[from] socialdrive_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}
