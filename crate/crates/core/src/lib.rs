//! Prompt-guided two-stage restoration of defocused microscopy images.

pub mod checkpoint;
pub mod canny;
pub mod color;
pub mod config;
pub mod defocus;
pub mod degrade;
pub mod diffusion;
pub mod edge;
pub mod encoders;
pub mod error;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pformer;
pub mod pipeline;
pub mod prompt_restore;
pub mod tiling;

pub use error::{Error, Result};
