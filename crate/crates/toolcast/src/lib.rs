//! File formats, training runs and the command line around `toolcast-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod run;

pub use error::{Error, Result};
pub use toolcast_core as core;
