//! Singer identity and vocal technique conversion with a Gaussian-mixture
//! variational autoencoder over log-mel chunks.

pub mod conversion;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod gmvae;
pub mod nn;
pub mod objective;
pub mod training;

pub use error::{Error, Result};
