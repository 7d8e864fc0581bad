//! Reproducible experiment pipeline over `sbi-vfm`: simulate, train,
//! sample, reference, evaluate, report. All randomness in a run derives from
//! the config's master seed, split by stage name.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::{ExperimentConfig, TaskKind};
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;
pub use pipeline::{
    cmd_evaluate, cmd_reference, cmd_report, cmd_run, cmd_sample, cmd_simulate, cmd_train, EvalReport, RunDir,
    SampleArgs,
};
