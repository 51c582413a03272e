//! Creative fine-tuning toolkit.
//!
//! A denoising diffusion policy is fine-tuned with a policy-gradient objective
//! whose reward trades style ambiguity (novelty) against text/image alignment
//! (utility). A Creative Adversarial Network baseline and a paired-seed
//! evaluation harness sit alongside the trainer.
//!
//! Pretrained scorers are reached only through [`backends`]; everything else
//! is testable offline against the deterministic mock backend.

pub mod backends;
pub mod can;
pub mod classifiers;
pub mod config;
pub mod data;
pub mod ddpo;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod reward;
pub mod rng;

pub use error::{Error, Result};
pub use image::Image;
