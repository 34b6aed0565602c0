//! Two-stage latent generative model at desk scale: diffusion over a learned
//! latent space, a reconstruction decoder, and contrastive representation
//! learning, plus few-shot conditional generation and a numerical lab that
//! measures prior holes.

pub mod autoencoder;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod priorhole;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{D2cError, Result};
