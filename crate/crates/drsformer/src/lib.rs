//! File formats, datasets and the command line around `drsformer-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod logs;
pub mod manifest;

pub use drsformer_core as core;
pub use error::{Error, Result};
