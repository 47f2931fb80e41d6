//! Hierarchical temporal pruning for diffusion-based 3D human pose lifting.
//!
//! The crate provides the building blocks of a pruned pose-lifting denoiser
//! and the machinery around it: temporal correlation masks, sparse-focused
//! temporal attention, density-peak token pruning, a DDIM sampler with
//! reprojection-based hypothesis aggregation, and a MAC profiler.

pub mod attention;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod htp1;
pub mod macs;
pub mod mgptp;
pub mod oracle;
pub mod pipeline;
pub mod poses;
pub mod rng;
pub mod synth;
pub mod tcep;
pub mod tensor;
pub mod verify;

pub use error::{HtpError, Result};
pub use tensor::{Mat, Ten3};
