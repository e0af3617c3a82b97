//! Anchor-pyramid crowd localization: learned anchor priors, density-gated
//! anchor selection, a cascade region counting loss, consistency-aware
//! target matching and point-set evaluation.

pub mod aaps;
pub mod count_loss;
pub mod ctr;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod math;
pub mod priors;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
