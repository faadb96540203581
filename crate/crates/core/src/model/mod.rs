//! A small decoder-only transformer over interleaved clip and word tokens.
//!
//! Clips are mean-pooled over frames and linearly projected to a fixed
//! number of embedding rows; words use a closed whitespace vocabulary. The
//! model is pre-norm with learned absolute positions, trained by exact
//! reverse-mode gradients of the answer-span negative log-likelihood.

mod assemble;
mod checkpoint;
mod forward;
mod generate;
mod params;
mod scalar;
mod tokenizer;
mod train;

pub use assemble::{assemble_sequence, AssembledSequence, SequencePurpose};
pub use checkpoint::{Checkpoint, RngState};
pub use forward::{encode_clip, forward, gradients, loss, Logits};
pub use generate::generate;
pub use params::{ModelConfig, ModelParams, ParamBlock};
pub use scalar::Scalar;
pub use tokenizer::Tokenizer;
pub use train::{train, AdamState, Precision, TrainConfig, TrainOutcome};
