//! Confidence-filtered relevance analysis for a desk-scale transformer
//! classifier.
//!
//! The crate trains a small vision-transformer surrogate on synthetic
//! land-cover imagery, scores per-sample epistemic uncertainty with a
//! Gaussian discriminant over CLS embeddings, computes class-specific
//! relevance maps by gradient- and relevance-weighted attention rollout, and
//! reports how per-land-cover-class relevance and its entropy shift across
//! confidence strata.

pub mod analysis;
pub mod data;
pub mod ddu;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod rollout;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
