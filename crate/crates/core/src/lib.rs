//! Diffusion-guided counterfactual generation for ordinal classifiers on
//! synthetic grade-chain data: score model, guided latent SDE, barrier
//! probe, self-corrective fine-tuning and the metrics used to judge them.

pub mod ablation;
pub mod barrier;
pub mod classifier;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sde;
pub mod selfcorrect;
pub mod synthdata;
pub mod vector;

pub use error::{DcaError, Result};
