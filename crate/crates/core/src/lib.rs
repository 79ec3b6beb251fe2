//! Visually-conditioned control branch for a frozen text-conditioned
//! pixel-space diffusion backbone, with a procedural figure dataset,
//! masked training, and an evaluation harness.

pub mod error;
pub mod graph;
pub mod image;
pub mod tensor;

pub use error::{Error, Result};
pub mod diffusion;
pub mod control;
pub mod encoders;
pub mod eval;
pub mod layers;
pub mod model;
pub mod params;
pub mod scenegen;
pub mod trainer;
