//! Weight-shared encoder-decoder restoration networks with dynamic
//! (variant-alternating) pre-training, plus the surrounding tooling:
//! degradation synthesis, dataset curation, restoration metrics, and a
//! parameter/FLOPs accounting layer.

pub mod analysis;
pub mod arch;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod curation;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod params;
pub mod quality;
pub mod trainer;

pub use error::{Error, Result};
