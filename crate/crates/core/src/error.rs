use crate::entropy::EntropyError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("frame dimensions {width}x{height} must both be even")]
    OddDimensions { width: usize, height: usize },
    #[error("input truncated at frame {frame}: needs {needed} bytes, {available} available")]
    Truncated {
        frame: usize,
        needed: usize,
        available: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("malformed bitstream: {0}")]
    Bitstream(String),
    #[error("bitstream was produced by model {stream}, checkpoint is {checkpoint}")]
    ModelMismatch { stream: String, checkpoint: String },
    #[error(transparent)]
    Checkpoint(#[from] anfvc_nn::archive::ArchiveError),
    #[error("conditional coder invoked without a conditioning signal")]
    MissingCondition,
    #[error("layer {0} is not registered with the rate-adaption net")]
    UnregisteredLayer(String),
    #[error("invalid lambda: {0}")]
    Lambda(String),
    #[error("bd-rate: {0}")]
    BdRate(String),
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("training: {0}")]
    Training(String),
    #[error("rd point {label}: {source}")]
    RdPoint { label: String, source: Box<Error> },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
