//! Synthesizes hallucination-inducing images for multimodal LLMs.
//!
//! The pipeline optimizes a CLIP image embedding so that a victim model,
//! fed through a learned [`bridge`] mapper, answers "Yes" about an absent
//! object, while staying close to the source image and away from the
//! object's text embedding. The optimized embedding then conditions a
//! diffusion decoder started from a partially noised latent of the source
//! image; a detector discards candidates that really contain the object.

pub mod attack;
pub mod bridge;
pub mod compose;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod image;
pub mod ingest;
pub mod optim;
pub mod run;
pub mod seed;
pub mod tensor;
pub mod verdict;

pub use error::{Error, Result};
