//! File formats and command implementations for the `crcrisk` executable.
//!
//! The heavy lifting lives in `crcrisk-core`; this crate owns everything
//! that touches a disk: cohort directories, checkpoints, feature caches,
//! report CSVs, portable-pixmap rasters, and the TOML run configuration.

pub mod checkpoint_io;
pub mod cohort_io;
pub mod commands;
pub mod config;
pub mod error;
pub mod feature_cache;
pub mod ppm;
pub mod reports;
pub mod schema_io;

pub use error::{CliError, Result};
