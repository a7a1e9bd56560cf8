//! Phrase grounding over bounding-box proposals by attention and
//! reconstruction.
//!
//! A phrase is encoded with an LSTM, every proposal of its image is scored by
//! a small perceptron, and the softmax over those scores is the grounding.
//! Without box annotations the attention is learned by reconstructing the
//! phrase from the attended visual feature; with annotations a direct loss on
//! the attention is added, or used alone.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod reconstruction;

pub use attention::{AttentionOutput, BBox, Phrase, ProposalSet};
pub use error::{Error, Result};
pub use model::{BatchItem, Mode, ModelConfig, ModelParams, Objective};
pub use numerics::Tensor;
pub use optim::{train, TrainConfig};
