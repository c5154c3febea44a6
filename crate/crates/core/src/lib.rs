//! Contrastive desensitization learning at desk scale.
//!
//! Real images from several style domains are encoded, their latent feature
//! statistics are swapped across domains, and an autoencoder learns to undo
//! the swap. The resulting representation feeds a small forgery classifier
//! evaluated with low false-alarm metrics.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod feature_stats;
pub mod graph;
pub mod losses;
pub mod models;
pub mod synthdata;
pub mod tensor;
pub mod theory_check;
pub mod training;

pub use error::{CdnError, Result};
pub use tensor::Tensor;
