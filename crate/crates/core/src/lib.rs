//! Formation-tree contrastive character recognition.
//!
//! Characters are parsed from ideographic description sequences into
//! [`FormationTree`]s, encoded by a subtree-attention transformer, and matched
//! against glyph images encoded by a masked patch transformer.

pub mod checkpoint;
pub mod experiments;
pub mod glyph;
pub mod ids;
pub mod model;
pub mod recognizer;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use glyph::GlyphImage;
pub use ids::{
    attention_adjacency, mask_unknown, parse, parse_str, serialize, Azimuth, FormationTree,
    FormationType, IdsError, IdsToken, NodeLabel, RadicalId, RadicalVocab,
};
pub use model::{EncoderOptions, Model, ModelConfig, ModelError};
pub use recognizer::{build_gallery, evaluate, recognize, EvalReport, Gallery, RecognizeError};
pub use synth::{make_splits, GlyphDataset, Split, SplitProtocol, SynthError, SynthParams};
pub use tensor::{Scalar, Tape, Tensor, TensorError, Var};
pub use train::{contrastive_loss, train_step, TrainError, Trainer};

use thiserror::Error;

/// Any failure of the library, grouped for process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ids(#[from] IdsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Recognize(#[from] RecognizeError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Exit status: 2 usage or parse errors, 3 data errors, 4 numeric failures.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

fn model_exit_code(e: &ModelError) -> i32 {
    match e {
        ModelError::InvalidConfig(_) => EXIT_USAGE,
        ModelError::Tensor(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ids(_) | Error::Usage(_) | Error::Json(_) => EXIT_USAGE,
            Error::Model(e) | Error::Recognize(RecognizeError::Model(e)) => model_exit_code(e),
            Error::Train(TrainError::Model(e)) => model_exit_code(e),
            Error::Train(TrainError::NonFiniteLoss { .. }) => EXIT_NUMERIC,
            Error::Train(_)
            | Error::Checkpoint(_)
            | Error::Synth(_)
            | Error::Recognize(_)
            | Error::Io(_)
            | Error::Data(_) => EXIT_DATA,
        }
    }
}
