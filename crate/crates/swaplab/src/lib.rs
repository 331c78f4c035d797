//! Desk-scale face-swap training lab.
//!
//! Everything runs on a synthetic parametric face world: images are rendered from
//! known identity/attribute factor vectors, so identity transfer and attribute
//! preservation can be measured exactly instead of eyeballed. On top of that sit a
//! lossless latent codec, a one-step conditional diffusion model with explicit
//! triplet supervision, and an evaluation suite with calibrated bounds.
//!
//! Module map:
//! - [`synthfaces`] — factor space, renderer, datasets, frozen oracle encoders
//! - [`landmarks`] — pose/expression coefficients and landmark rasterization
//! - [`tripletforge`] — triplet construction via proxy swappers
//! - [`diffcore`] — noise schedule, latent codec, samplers, losses
//! - [`swapnets`] — the three-branch conditional UNet (SwapNet/FaceNet/ID adapter)
//! - [`trainer`] — training loop, checkpoints, control finetunes, the `swap` op
//! - [`evalsuite`] — identity/attribute metrics, Fréchet distance, reports
//! - [`cli`] — the `swaplab` command-line entry points
//! - [`tensor`] — minimal f64 reverse-mode autodiff used by everything above

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod evalsuite;
pub mod landmarks;
pub mod swapnets;
pub mod synthfaces;
pub mod tensor;
pub mod trainer;
pub mod tripletforge;
pub mod util;

pub use error::SwapLabError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SwapLabError>;
