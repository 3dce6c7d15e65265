//! Geometry-aware diffusion sampling for novel view synthesis.
//!
//! Input views are lifted into frustum-aligned feature volumes, aggregated
//! into a feature field, volume-rendered into the target view and used to
//! condition an image denoiser driven by a Heun sampler. Sequences are built
//! autoregressively under a choice of conditioning policies.

pub mod autoregressive;
pub mod denoisers;
pub mod diffusion;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod renderer;
pub mod rng;

pub use denoisers::{CondInput, DenoiseError, Denoiser};
pub use geometry::Camera;
pub use image::Image;
