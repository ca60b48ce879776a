use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown block id `{0}`")]
    UnknownBlock(String),

    #[error("self-loop on block `{0}`")]
    SelfLoop(String),

    #[error("duplicate block id `{0}`")]
    DuplicateBlock(String),

    #[error("invalid block `{id}`: {reason}")]
    InvalidBlock { id: String, reason: String },

    #[error("unknown respondent `{0}`")]
    UnknownRespondent(String),

    #[error("response for `{respondent}` does not contain the home block `{home}`")]
    HomeMissing { respondent: String, home: String },

    #[error("neighborhood of `{subject}` is not contiguous; disconnected blocks: {}", disconnected.join(", "))]
    NotContiguous {
        subject: String,
        disconnected: Vec<String>,
    },

    #[error("rank index {index} out of range (ordering has {len} blocks)")]
    RankOutOfRange { index: usize, len: usize },

    #[error("design is rank-deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("blocks are missing columns required by the {model} model: {}", columns.join(", "))]
    MissingColumns { model: String, columns: Vec<String> },

    #[error("mode finding did not converge after {iterations} iterations (gradient max-norm {grad_norm:.3e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
