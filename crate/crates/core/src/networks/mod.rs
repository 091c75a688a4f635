//! Transcription network (stacked BiLSTM), prediction network (embedding +
//! LSTM) and the multiplicative joint network, with hand-written backward
//! passes.

mod checkpoint;
mod lstm;
mod model;
mod vocab;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointKind, NamedTensor, FORMAT_VERSION};
pub use lstm::{lstm_step, LstmState, LstmStepCache, LstmWeights};
pub use model::{
    ActivationHook, BiLstmLayer, ForwardCache, JointNet, ModelConfig, NoHook, PredictionNet,
    RnntModel, TranscriptionNet,
};
pub use vocab::{AcousticSequence, TokenId, TokenSequence, Vocabulary, NULL_ID};
