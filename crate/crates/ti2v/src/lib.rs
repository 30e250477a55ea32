//! IO, file formats, training orchestration, evaluation, and the CLI around
//! the `ti2v-core` engine: VTF tensor files, PGM dumps, dataset generation,
//! checkpoints, the multi-stage trainer, log-SNR CSV export, the evaluation
//! suite, and the ablation harness.

pub mod ablate;
pub mod checkpoint;
pub mod dataset;
mod error;
pub mod evalio;
pub mod pgm;
pub mod sampling;
pub mod schedule_csv;
pub mod trainer;
pub mod vtf;

pub use error::{Error, Result};
