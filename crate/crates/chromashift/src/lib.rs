//! Files, datasets, configuration, checkpoints and the command-line tool
//! around [`chromashift_core`].

pub use chromashift_core as core;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod report;
