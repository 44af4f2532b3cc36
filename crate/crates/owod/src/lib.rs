//! Standard-library side of the toy open-world detector: dataset files,
//! experiment configs, checkpoints, CSV artifacts, run reports and the
//! experiment runners behind the `owod` binary.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod report;

pub use owod_core as core;
