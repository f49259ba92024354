//! Command-line entry points, configuration, and all on-disk formats.

pub mod dataset;
pub mod formats;
