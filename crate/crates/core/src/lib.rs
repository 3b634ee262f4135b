//! Structured expert pruning for mixture-of-experts layers.
//!
//! The crate is `no_std` and only needs `alloc`. It contains a small
//! mixture-of-experts layer simulator with planted functional structure,
//! the scoring functions used to rank experts (reconstruction loss,
//! activation variability, per-domain performance vectors), the clustering
//! machinery (k-means, Spearman similarity, Ward linkage), and the pruning
//! strategies built on top of them:
//!
//! * [`prune::prune_random`] and [`prune::prune_frequency`] baselines,
//! * [`prune::prune_enum`], exhaustive or greedy reconstruction-loss search,
//! * [`prune::prune_gvp`], a general core plus the globally most specialised experts,
//! * [`prune::prune_mop`], a general core plus one representative per
//!   functional cluster ("cluster-then-select").
//!
//! File formats, configuration and the command line live in the `mop` crate.
//!
//! Enable the `parallel` feature to evaluate subset losses on a rayon pool;
//! results are identical to the sequential path.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod cluster;
pub mod combin;
mod error;
pub mod eval;
pub mod matrix;
pub mod metrics;
pub mod moe;
pub mod planted;
pub mod prune;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use moe::{CalibrationCache, ExpertTransform, MoeLayer};
pub use planted::{PlantedLayer, PlantedSpec};
pub use prune::{Method, PruningPlan};
