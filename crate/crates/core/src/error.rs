use numcore::NumError;
use thiserror::Error;

use crate::model::NeuronSite;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("checkpoint format error at {tensor}: {msg}")]
    Format { tensor: String, msg: String },

    #[error("tokenization error: {0}")]
    Tokenize(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("site {site} out of range for {n_layers} layers × {d_ff} neurons")]
    Site {
        site: NeuronSite,
        n_layers: usize,
        d_ff: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("state error: {0}")]
    State(String),

    #[error("selection error: {msg} (available: {available})")]
    Selection { msg: String, available: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Training { step: usize, loss: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
