//! Organoid morphometry pipeline: ingestion of tiled instance label maps,
//! post-processing, shape descriptors, group statistics, detection scoring
//! and deterministic reports.

pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod ingestion;
pub mod morphometrics;
pub mod pipeline;
pub mod postprocess;
pub mod reporting;
pub mod stats;
pub mod synth;
