//! Core of a radar-camera semantic occupancy model with a training-only
//! temporal enhancement branch.
//!
//! Everything here is pure computation over in-memory data and builds
//! without `std`: voxel-grid geometry, a small reverse-mode autodiff tape,
//! the camera / radar / temporal-decoder / fusion networks, the training
//! step, and a procedural driving-scene simulator. File formats, the CLI
//! and wall-clock measurement live in the `teocc` companion crate.

#![no_std]

extern crate alloc;

pub mod autograd;
pub mod camnet;
pub mod error;
pub mod fusionhead;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pose;
pub mod radarnet;
pub mod scenesim;
pub mod tempenh;
pub mod tensor;
pub mod train;

mod kernels;

pub use error::{Error, Result};
pub use grid::{
    flip_grid, make_grid_spec, Axis, Flip, GridSpec, OccupancyLabelGrid, SemanticLabelSet,
    VoxelFeatureGrid,
};
pub use metrics::{miou, per_class_iou, ConfusionMatrix};
pub use pose::EgoPose;
pub use tensor::Tensor;

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;
