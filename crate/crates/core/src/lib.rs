//! Generalized few-shot point-cloud segmentation with hierarchical
//! orthogonal prototypes, base-gradient projection and a dual-entropy
//! regularizer, plus a synthetic benchmark harness.

pub mod data;
pub mod error;
pub mod hop_ent;
pub mod hop_grad;
pub mod hop_rep;
pub mod linalg;
pub mod net;
pub mod trainer;

pub use error::{Error, Result};
