//! Adaptive marginalized semantic hashing for cross-modal retrieval over
//! paired or unpaired multi-modal data.
//!
//! Training runs in two steps. [`code_learning`] learns hash codes for every
//! training sample by alternating closed-form updates of a margin-relaxed
//! label regression, orthogonality-constrained latent representations and
//! asymmetric similarity preservation. [`function_learning`] then fits
//! per-modality hash functions on RBF anchor features, again with adaptive
//! margins. [`retrieval`] encodes queries and ranks database codes by Hamming
//! distance, and [`evaluation`] scores rankings with MAP and PR curves.
//! [`pipeline`] ties the steps together.

pub mod code_learning;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod function_learning;
pub mod kv;
pub mod pipeline;
pub mod retrieval;
pub mod stiefel;

pub use error::{Error, Result};
