//! Experiment orchestration behind the `simclip` command.

pub mod cli;
pub mod compare;
pub mod experiments;
pub mod runs;

pub use compare::{compare_records, compare_runs, ComparisonTable};
pub use experiments::{fig4_stopgrad, table2_targeted};
pub use runs::{default_run_root, run_experiment, RunDir, RUN_ROOT_ENV};
