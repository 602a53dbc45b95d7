//! Matryoshka audio-text embedding lab.
//!
//! A dual encoder (toy acoustic and text encoders) learns unit-norm
//! embeddings whose leading prefixes are usable on their own. Prefixes are
//! supervised by aligning them to text embeddings compressed through the
//! top singular directions of a corpus-wide dependency matrix, while a
//! pluggable metric-learning loss trains the full embedding.
//!
//! Module map:
//! - [`tensor`]: dense tensors and reverse-mode autodiff
//! - [`linalg`]: SVD, row softmax, corpus mean
//! - [`encoders`]: acoustic and text encoders with pooling
//! - [`objectives`]: main losses, prefix alignment, the delayed weight
//! - [`matryoshka`]: prefix schedule, epoch heads, training step
//! - [`data`]: synthetic keyword corpus and batch sampler
//! - [`eval`]: trials, AP / EER / AUC
//! - [`config`], [`train`], [`ablate`], [`checkpoint`]: run orchestration and I/O

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod rng;
pub mod tensor;
pub mod encoders;
pub mod objectives;
pub mod matryoshka;
mod binio;
pub mod data;
pub mod eval;
pub mod config;
pub mod train;
pub mod ablate;
pub mod checkpoint;

pub use error::{MateError, Result};
pub use tensor::{Graph, Tensor, Var};
