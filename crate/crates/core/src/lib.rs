//! Few-shot personalization of a pose-conditioned pixel-space denoiser and
//! distillation of a hash-grid radiance field avatar from it.
//!
//! The pipeline has two stages:
//!
//! 1. [`booth`]: fine-tune a conditional denoiser on a handful of subject
//!    images with a reconstruction loss plus a condition prior-preservation
//!    loss computed on samples from the frozen base model.
//! 2. [`distill`]: optimize a [`field::RadianceField`] with skeleton-conditioned
//!    score distillation, a local density margin loss on part meshes and a
//!    multi-resolution / zoom-in render schedule.

pub mod booth;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod guidance;
pub mod image;
pub mod math;
pub mod nn;
pub mod optim;
pub mod render;
pub mod schedule;
pub mod synth;

#[cfg(feature = "cli")]
pub mod commands;

pub use error::{Error, Result};
pub use image::Image;
pub use math::{Aabb, Vec3};
