//! Dataset handling, checkpoints, training and evaluation pipeline, reports
//! and the command-line interface built on `diad-core`.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gridfile;
pub mod imageio;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
