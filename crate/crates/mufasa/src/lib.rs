//! mufasa: a multimodal-fusion, sparse-attention sequential recommender.
//!
//! The crate is organized in layers:
//!
//! * [`tensor`] / [`tape`] / [`params`] — a minimal dense f64 tensor library
//!   with reverse-mode differentiation and a finite-difference oracle.
//! * [`mfl`] — the multimodal fusion layer: fuses per-item modality stacks
//!   into a single embedding, trained with a four-part joint objective.
//! * [`sal`] — the sparse-attention alignment layer: windowed, block-level,
//!   and selective attention over interaction sequences, gated into a user
//!   embedding and trained contrastively against target items.
//! * [`data`] — synthetic corpus generation, a matrix-factorization oracle
//!   for collaborative-filtering embeddings, file I/O, and split protocols.
//! * [`eval`] — ranking metrics, evaluation protocols, and ablation variants.
//! * [`train`] / [`model`] / [`config`] / [`cli`] — the two-stage training
//!   pipeline and the operator-facing command layer.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mfl;
pub mod model;
pub mod params;
pub mod sal;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
