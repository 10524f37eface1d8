//! Transfer sequential VAE for unsupervised video domain adaptation.
//!
//! A sequence is encoded into one static latent per video (appearance, and
//! therefore domain) and one dynamic latent per frame (motion, and therefore
//! the task). Mutual-information, contrastive-triplet, adversarial and
//! pseudo-labelled classification losses push domain information into the
//! static latent so the dynamic latents can be classified across domains.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
