//! Differentiable multi-object SDF scenes: rendering, analysis-by-synthesis
//! fitting, synthetic data generation and evaluation metrics.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod renderer;
pub mod shape_space;

pub use error::{Error, Result};
