//! Files, configuration and experiment plumbing around `mop-core`.
//!
//! * [`store`]: the `<path>.json` manifest plus `<path>.bin` blob archive
//!   format every command reads and writes.
//! * [`codec`]: layers, calibration caches and pruning plans in that format.
//! * [`config`]: the JSON experiment config and its hash.
//! * [`report`]: method comparison tables and heatmap CSVs.
//! * [`pipeline`]: the seeded end-to-end run behind `mop run`.

pub mod codec;
pub mod config;
pub mod output;
pub mod pipeline;
pub mod report;
pub mod store;
