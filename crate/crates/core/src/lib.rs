//! RNN-transducer training and decoding at desk scale, with label-preserving
//! perturbation of the prediction network's input history.
//!
//! Modules, bottom up:
//! - [`numerics`]: matrices, log-domain helpers, AdamW, learning-rate schedule, seeded RNG
//! - [`networks`]: transcription / prediction / joint networks with hand-written backward passes
//! - [`transducer`]: lattice forward-backward, likelihood, gradients, enumeration oracle
//! - [`perturb`]: SwitchOut and token-LM scheduled sampling
//! - [`tokenlm`]: LSTM token language models
//! - [`decode`]: greedy and alignment-length synchronous beam search, density-ratio fusion, WER
//! - [`harness`]: synthetic data, training loop, evaluation, gradient check, config

pub mod decode;
pub mod error;
pub mod harness;
pub mod networks;
pub mod numerics;
pub mod perturb;
pub mod tokenlm;
pub mod transducer;

pub use error::{Error, Result};
