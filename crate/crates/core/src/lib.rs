//! Reference-guided UV texture synthesis for garment meshes.
//!
//! Pipeline: procedural garments and reference renders ([`synth`]), an 8×
//! image codec ([`codec`]), input assembly ([`conditioning`]), a small
//! latent denoiser with class conditioning ([`diffusion`], [`type_select`]),
//! DDIM sampling ([`sampler`]) and evaluation ([`metrics`]).

pub mod codec;
pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod raster;
pub mod sampler;
pub mod synth;
pub mod tensor_file;
pub mod type_select;

pub use error::{Error, ErrorKind, Result};
