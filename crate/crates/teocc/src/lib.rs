//! Files, training harness and command line for the `teocc-core`
//! occupancy model.
//!
//! Linking this crate installs a counting global allocator so that the
//! harness can report peak heap usage per phase.

pub mod blob;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod harness;
pub mod memory;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use harness::{
    evaluate, evaluate_checkpoint, infer, run_ablation, run_training, train, AblationReport, Dataset, MetricsRecord,
    MetricsReport, Variant,
};

#[global_allocator]
static ALLOCATOR: memory::CountingAllocator = memory::CountingAllocator;
