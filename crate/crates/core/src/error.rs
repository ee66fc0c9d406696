use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("out-of-vocabulary token '{0}'")]
    OutOfVocabulary(String),

    #[error("unknown token id {0}")]
    UnknownTokenId(usize),

    #[error("unknown modality '{0}'")]
    UnknownModality(String),

    #[error("unknown task type '{0}'")]
    UnknownTaskType(String),

    #[error("unknown method '{0}'")]
    UnknownMethod(String),

    #[error("modality {0} has no registered encoder/projection")]
    UnregisteredModality(String),

    #[error("context overflow: sequence of {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("empty target")]
    EmptyTarget,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty caption")]
    EmptyCaption,

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty question generated from caption '{0}'")]
    EmptyQuestion(String),

    #[error("candidate '{0}' has no reference")]
    MissingReference(String),

    #[error("length mismatch: {0} predictions vs {1} answers")]
    LengthMismatch(usize, usize),

    #[error("undefined ratio: s_ii is zero for task {0}")]
    UndefinedRatio(usize),

    #[error("incomplete score matrix, missing cells: {0}")]
    IncompleteMatrix(String),

    #[error("missing diagonal entry s_{task}^{task} for task {task} ({method}, order {order})")]
    MissingDiagonal {
        method: String,
        order: String,
        task: usize,
    },

    #[error("task {task} evaluated at step {step} before it was trained")]
    UntrainedTask { task: usize, step: usize },

    #[error("old model snapshot required for task {0}")]
    MissingSnapshot(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("toml: {0}")]
    Toml(String),

    #[error("plot: {0}")]
    Plot(String),
}
