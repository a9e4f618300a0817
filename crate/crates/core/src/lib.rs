//! Joint embedding of partial, cluttered scan objects and clean CAD models.
//!
//! The crate is organised bottom-up:
//!
//! - [`voxel`]: 32³ occupancy grids, surface voxelization, up-axis rotation, IoU
//!   and the `SCVX` grid file format.
//! - [`autodiff`]: a small define-by-run reverse-mode engine over dense 5-axis
//!   tensors with exactly the operations the networks need, plus Adam and the
//!   `SCCK` checkpoint format.
//! - [`nets`]: the stacked hourglass (segmentation, completion, embedding
//!   encoders) and the proposal autoencoder.
//! - [`datagen`]: procedural scan/CAD pairs with ground-truth masks and the
//!   on-disk pair manifest.
//! - [`trainer`]: triplet assembly, negative resampling, the learning-rate
//!   schedule and the training loop.
//! - [`embedspace`]: exact kNN, the scan/CAD confusion score, candidate
//!   proposals and the `SCEM` embedding file format.
//! - [`benchmark`]: annotation records, retrieval accuracy, ranking quality,
//!   category accuracy and report aggregation.

pub mod autodiff;
pub mod benchmark;
pub mod datagen;
pub mod embedspace;
mod error;
pub mod nets;
pub mod trainer;
pub mod voxel;

pub use error::{Error, Result};
