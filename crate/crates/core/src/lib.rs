//! Multi-revisit satellite super-resolution with a conditional latent
//! diffusion denoiser and reverse-trajectory fusion.
//!
//! Pipeline: [`synthdata`] produces HR scenes with degraded LR revisits,
//! [`codec`] maps images to Haar latents, [`trainer`] fits the
//! [`denoiser`] on width-concatenated `[LR | HR]` latents, and [`fusion`]
//! runs one DDIM trajectory per revisit while periodically pulling every
//! trajectory's clean estimate toward a shared center.

pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod format;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod real;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Image, Tensor3};
