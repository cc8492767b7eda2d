//! Command-line harness for the quantization-aware training library:
//! curve emission, gradient checks, toy training runs, ablation grids and
//! integer-code export.

pub mod ablate;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod corpus;
pub mod curves;
pub mod export;
pub mod table;
pub mod train;

/// Environment variable holding the number of parallel ablation workers.
pub const WORKERS_ENV: &str = "QAT_WORKERS";
