//! Command-line harness around `ucorr-core`: synthetic dataset files,
//! training runs with checkpoints and logs, evaluation reports, the variant
//! ablation, and single-shot inference.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod io;
pub mod panel;
pub mod report;

pub use config::Config;
