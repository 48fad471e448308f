//! Contrast-correlation weighted contrastive pretraining for multi-phase
//! organ segmentation, demonstrated on synthetic CT phantoms.

pub mod analysis;
pub mod cli;
pub mod dcc;
pub mod error;
pub mod model;
pub mod phantom;
pub mod preprocess;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
