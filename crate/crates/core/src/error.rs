use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by `{op}`")]
    Numeric { op: &'static str },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("scene `{0}` contains no records")]
    EmptyScene(String),

    #[error("scene `{scene}` has zero extent on the {axis} axis")]
    DegenerateExtent { scene: String, axis: char },

    #[error("dataset split would leave the {side} side empty")]
    EmptySplit { side: &'static str },

    #[error("no windows available: {0}")]
    EmptyDataset(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
