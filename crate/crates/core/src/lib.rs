//! Masked-image clustering pretraining for vision transformers.
//!
//! A teacher/student ViT pair is trained with a masked-pixel reconstruction
//! loss and class- and patch-level clustering losses. The student processes
//! corrupted crops with a split attention: unmasked tokens attend among
//! themselves, masked tokens cross-attend to the unmasked ones only, which
//! cuts the score matrix from `n²` to `n·(n−m)` entries.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod knn;
pub mod losses;
pub mod masking;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;
pub mod views;
pub mod vit;

pub use error::{Error, Result};
