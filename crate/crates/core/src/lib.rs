//! Logit-space adaptation transfer.
//!
//! A small adapter is trained to map a weak model's pre-trained logits onto
//! its fine-tuned logits. The adapter works in a latent space reached through
//! an orthonormal transition matrix, so it can be moved to a stronger model by
//! a closed-form orthogonal basis change, without any backpropagation through
//! the stronger model.
//!
//! Modules, bottom-up:
//! - [`numerics`]: matrices, matrix exponential, SVD, Procrustes.
//! - [`diffkit`]: reverse-mode tape over the adapter's layers, KL loss.
//! - [`banks`]: feature/logit banks, their file formats, synthetic banks.
//! - [`anchors`]: auxiliary anchor class sampling.
//! - [`adapter`]: the adapter module and its file format.
//! - [`training`]: AdamW, noise augmentation, extraction and labeled refinement.
//! - [`transfer`]: basis change, naive transfer, logit-arithmetic baseline.
//! - [`eval`]: prediction, accuracy, harmonic mean, reports, cost estimate.

pub mod adapter;
pub mod anchors;
pub mod banks;
pub mod diffkit;
mod error;
pub mod eval;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use numerics::{Matrix, SkewSymmetric};
