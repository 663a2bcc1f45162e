//! Question and image encoders.

mod cnn;
mod gru;
mod vocab;

pub use cnn::{CnnConfig, ToyCnn};
pub use gru::{GruConfig, GruEncoder, GruMasks, QuestionBatch, StepStats, PAD_ID};
pub use vocab::{Vocab, PAD_TOKEN};
