//! Byte-level transformer language model: forward/backward, training,
//! gradient checking and checkpoints.

mod checkpoint;
mod encode;
mod gradcheck;
mod model;
mod scalar;
mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use encode::{encode_segments, EncodedSegments};
pub use gradcheck::{gradient_check, GradCheckReport, GradMismatch};
pub use model::{
    ForwardOutput, Layout, Matrix, ModelConfig, Slot, TransformerLm, BOS, BYTE_VOCAB, PAD, SEP,
    VOCAB_SIZE,
};
pub use scalar::Scalar;
pub use train::{
    batch_loss, evaluate, learning_rate_at, train, StepRecord, TrainConfig, TrainReport,
    TrainingExample,
};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("input of {len} tokens exceeds the context of {max} positions")]
    Overlength { len: usize, max: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("token id {0} is outside the vocabulary")]
    BadToken(u16),
    #[error("mask has {mask} entries for {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error("the first position has no prediction and cannot be scored")]
    UnscorableFirst,
    #[error("empty training set")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
