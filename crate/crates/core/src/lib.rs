//! Per-image reconstruction of Cα backbone conformations from simulated cryo-EM images.
//!
//! A decoder (graph network or MLP) maps a per-image latent code to displacements
//! of a template conformation. Decoder weights and latents are fit jointly by
//! minimizing the misfit between each image and the projection of its decoded
//! conformation, with optional grid-based pose estimation when orientations are unknown.

pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod graph;
pub mod imaging;
pub mod loss;
pub mod nn;
pub mod pose;
pub mod train;

pub use error::{Error, Result};
