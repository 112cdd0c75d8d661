//! Conditional semi-supervised adversarial augmentation over precomputed
//! sentence embeddings.
//!
//! A generator conditions on an unlabeled message's embedding to produce a
//! fake label embedding; the element-wise product forms a fake latent. Real
//! latents multiply a labeled embedding with a trainable label row. A k+1
//! class discriminator (fake logit fixed at zero) learns from both.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
