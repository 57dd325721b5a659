//! Core of the grid-point pipeline for one-shot structured light.
//!
//! The stages, in the order the pipeline runs them:
//!
//! 1. [`pattern`]: De Bruijn coded grid patterns and their analytic intersections.
//! 2. [`scene`]: synthetic projector/camera captures over parametric surfaces,
//!    one-shot and two-shot, with exact groundtruth feature points.
//! 3. [`label`]: skeleton label images from the two-shot pair.
//! 4. [`patches`]: 64×64 patch tiling, train/val splits, augmentation and the
//!    dataset manifest.
//! 5. [`detect`]: skeleton-based grid-point detection on a probability map,
//!    plus the classical threshold-and-thin baseline.
//! 6. [`eval`]: point matching, MAE, D-index, count tables and overlays.
//!
//! The segmentation network itself lives in the `gridpoint-net` crate.

pub mod detect;
pub mod error;
pub mod eval;
pub mod image;
pub mod label;
pub mod patches;
pub mod pattern;
pub mod scene;
pub mod seed;

pub use error::{Error, Result};
pub use image::{BinaryImage, Gray, Point};
