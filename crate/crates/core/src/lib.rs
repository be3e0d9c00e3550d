//! Joint learning of a compressive-sensing sensing matrix and an
//! overcomplete sparsifying dictionary from large patch corpora.
//!
//! The pipeline alternates a closed-form sensing design ([`sensing`]) with an
//! online mini-batch dictionary learner ([`dictionary`]) under the
//! [`joint`] trainer; [`sparse`] provides the OMP coder used for both
//! training and decoding, [`patches`] turns images into training columns and
//! [`metrics`] scores reconstructions.

pub mod dictionary;
pub mod error;
pub mod joint;
pub mod metrics;
pub mod model;
pub mod patches;
pub mod sensing;
pub mod sparse;
pub mod synthetic;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use model::{
    Diagnostics, Dictionary, SensingDesign, SparseCodeBatch, SurrogateStats, TrainConfig,
    UpdateMode,
};
