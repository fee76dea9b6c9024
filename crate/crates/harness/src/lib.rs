//! Experiment harness around `comchain`: configuration, data preparation,
//! sweeps, analytic cost tables and reports. The `comchain` binary is a thin
//! command-line layer over these modules.

pub mod config;
pub mod macs;
pub mod report;
pub mod svg;
pub mod sweep;
pub mod workspace;
