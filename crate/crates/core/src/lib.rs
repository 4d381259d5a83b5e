//! Tabular diabetes classification with sparse-autoencoder features and
//! VAE-based minority oversampling.

pub mod classifier;
pub mod data;
pub mod error;
pub mod joint;
pub mod nn;
pub mod sae;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
