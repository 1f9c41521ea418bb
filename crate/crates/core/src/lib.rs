//! Desk-scale building blocks for 5-year colorectal cancer risk modeling.
//!
//! The crate covers the full modeling path on fully synthetic data with
//! planted, known signal: cohort generation ([`synth`]), slide tiling
//! ([`tiling`]), frozen patch featurization ([`featurizer`]), a region
//! transformer with masked pretraining and exact gradients ([`maskhit`],
//! [`autodiff`]), the training regimes ([`training`]), tabular clinical
//! baselines ([`clinical`]), multi-modal fusion ([`fusion`]), a repeated-split
//! evaluation harness ([`evalstat`]), and attention/Shapley attribution
//! ([`interpret`]).
//!
//! Everything here is pure computation over in-memory data: no files, no
//! clocks, no global state. All randomness flows through explicitly seeded
//! generators ([`rng`]), so every result is reproducible bit for bit from a
//! config and a seed. File formats and the command-line front end live in the
//! companion `crcrisk` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod clinical;
pub mod cohort;
pub mod error;
pub mod evalstat;
pub mod featurizer;
pub mod fusion;
mod fx;
pub mod interpret;
pub mod linalg;
pub mod maskhit;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod tiling;
pub mod training;

pub use error::{Error, Result};
