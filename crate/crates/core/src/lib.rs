//! Out-of-distribution detection by sample repairing.
//!
//! An input image is eroded (downsampled, partially blacked out, or left
//! untouched), repaired by an encoder–decoder trained on in-distribution
//! data, and scored by the perceptual distance between the input and its
//! repaired version. In-distribution samples come back close to where they
//! started; out-of-distribution samples get pulled toward the training
//! manifold and score high.
//!
//! This crate is `no_std` and only needs `alloc`. File formats, dataset
//! manifests and the command-line harness live in the `srood` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod checkpoint;
pub mod erosion;
mod error;
pub mod evaluation;
mod image;
pub mod metrics;
pub mod nn;
pub mod repairer;
pub mod rng;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
pub use image::{Image, ImageBatch};
