//! Latent diffusion for 4D radar point clouds.
//!
//! Generates radar points (position, Doppler, RCS) by running a DDPM in the
//! latent space of a density-preserving point VAE, conditioned on 3D bounding
//! boxes (foreground) or LiDAR point clouds (background). Includes the radar
//! frame data model, generation-quality metrics, and Doppler-aware
//! augmentation (GT-sampling, sector mixing, global transforms).

pub mod augment;
pub mod checkpoint;
pub mod cond;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod frame;
pub mod metrics;
pub mod num;
pub mod pipeline;
pub mod vae;

pub use error::{Error, Result};
