//! Image-conditioned color and texture editing of gaussian-splat scenes.
//!
//! An edit image is segmented into regions, each region gets a color or
//! texture directive, and a sampled subset of dataset views is segmented and
//! matched to those regions in feature space. The views are edited in 2D and
//! the scene is finetuned on them: texture first (nearest-neighbour feature
//! matching), then color (L1 + SSIM).

pub mod cli;
pub mod error;
mod external;
pub mod features;
pub mod fixture;
pub mod image;
pub mod pipeline;
pub mod scene;
pub mod segmentation;
pub mod service;
pub mod splat;
pub mod style;

pub use error::{Error, Result};
