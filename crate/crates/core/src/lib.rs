//! Learned replacements for long-context KV-cache attention.
//!
//! For a fixed long context, each (layer, KV head) of a frozen transformer
//! gets a small surrogate that predicts two functions of the rotated query:
//! the log-normalizer of the attention logits over the context and the
//! softmax-weighted value average. At decode time the pair is blended with
//! exact attention over the locally generated tokens through one softmax,
//! which reproduces full attention exactly when the pair is exact.

pub mod blend;
pub mod autodiff;
pub mod codec;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod surrogate;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use error::{Error, FileKind, Result};
