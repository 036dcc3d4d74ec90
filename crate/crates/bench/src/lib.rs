//! YCSB-style workloads, the benchmark harness and the `tierkv` CLI.

pub mod cli;
pub mod config;
pub mod demand;
pub mod harness;
pub mod plot;
pub mod workload;

pub use config::BenchConfig;
pub use harness::{load_phase, run_experiment, RunOptions, RunReport, Sample, Summary};
pub use workload::{KeyDistribution, Mix, Op, OpStream, WorkloadSpec};
