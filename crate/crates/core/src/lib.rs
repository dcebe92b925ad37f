//! Continual multimodal question-answering laboratory.
//!
//! The crate builds up from a dense linear-algebra substrate with
//! reverse-mode differentiation ([`linalg`]) through three model stages
//! (noise-filtered fusion, prototype memory, answer decoding) to a full
//! sequential-training harness with forgetting metrics and deterministic
//! synthetic data.

pub mod error;
pub mod linalg;

pub use error::{Error, Result};
pub use linalg::{cosine_sim, sigmoid, softmax, Matrix, Vector};
pub use linalg::tape::{Gradients, Tape, Var};

pub mod ama;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod gonf;
pub mod harness;
pub mod optim;
pub mod pipeline;
