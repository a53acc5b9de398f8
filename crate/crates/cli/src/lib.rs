//! Experiment runner for hashlab: dataset ingestion, TOML configuration and
//! the train / encode / eval / retrieve / compare workflows behind the
//! `hashlab` binary.

pub mod config;
pub mod dataset;
pub mod workflow;

pub use config::{ExperimentConfig, Precision};
pub use dataset::{ingest, split, synth_blobs, DataFormat, Dataset, SplitConfig, Splits};
pub use workflow::{
    cmd_compare, cmd_encode, cmd_eval, cmd_retrieve, cmd_train, exit_code, CompareAxis, CompareTable,
    RetrieveSource, Role,
};
