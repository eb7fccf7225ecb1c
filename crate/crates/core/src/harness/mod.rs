//! Config-driven experiments: CSV ingestion, synthetic data, strategy runs
//! with serialized outputs, and the scaling benchmark.

pub mod bench;
pub mod config;
pub mod data;
pub mod run;
pub mod synth;

pub use bench::{benchmark, log_log_slope, BenchOptions, BenchReport, Timing};
pub use config::{ModelConfig, SCHEMA_VERSION};
pub use data::{load_csv, read_csv, write_csv, Dataset, GroupColumn};
pub use run::{fit, run, summarize_dir, Fit, RunFlags, RunManifest, StrategyChoice};
pub use synth::{synth_data, GroundTruth};

use crate::error::Error;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Numerical(_) => 4,
            HarnessError::Io(_) => 1,
        }
    }

    pub(crate) fn config(e: Error) -> Self {
        HarnessError::Config(e.to_string())
    }

    pub(crate) fn numerical(e: Error) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;
