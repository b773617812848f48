//! Stage orchestration: config, in-memory experiments and on-disk stages.

pub mod config;
pub mod experiment;
pub mod stages;

pub use config::{EvalConfig, PathsConfig, RunConfig};
pub use experiment::{
    run_ablation_suite, run_mode, sweep_k, sweep_lambda, train_eval, Grouping, ModeRun, Prepared, SweepPoint,
};
pub use stages::{Manifest, Pipeline, Stage, StageOptions, StageOutcome};
