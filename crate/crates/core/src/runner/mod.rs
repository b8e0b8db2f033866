//! End-to-end experiment orchestration: config, the training loop with
//! validation-based selection, evaluation with confidence intervals, and
//! artifact persistence.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod train;

pub use artifacts::{export_weight_trajectory, write_artifacts, ResultSummary};
pub use checkpoint::Checkpoint;
pub use config::{Algorithm, DataSource, MtmKind, RunConfig};
pub use eval::{evaluate, EvalReport, EvalSetup, EvalStream};
pub use train::{train_episode, train_run, EpochRecord, Phase, RunRecord, TrainRun};
