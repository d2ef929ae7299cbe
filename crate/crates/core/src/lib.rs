//! Physics-guided diffusion for dexterous grasp synthesis.
//!
//! The crate bundles a simplified articulated hand with analytic forward
//! kinematics, three contact/penetration energies with pose gradients, a
//! pose-space DDPM with a small hand-differentiated denoiser, guided
//! reverse samplers, and a quasi-static grasp evaluation and filtering
//! pipeline. The `dgforge` binary drives it end to end.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kinematics;
pub mod model;
pub mod net;
pub mod objectives;
pub mod parallel;
pub mod sampler;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
