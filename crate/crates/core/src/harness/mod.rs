//! Configuration, run orchestration, metrics and file emission.
mod config;
mod report;
mod run;
mod trace;
pub mod verify;

pub use config::{ConfigBuilder, LearnerSettings, LearnerSpec, RunConfig, Scale};
pub use report::{lowerbound_report, LowerBoundReport};
pub use run::{
    best_fixed_arm, compare, pseudo_loss, run, run_learner, run_on, sweep, AnyLearner, Oracle,
    RunOptions,
};
pub use trace::{
    load_rows, load_summary, read_rows, write_rows, HardRestartLog, InvariantReport, RunSummary,
    RunTrace, TraceRow, CSV_HEADER,
};
