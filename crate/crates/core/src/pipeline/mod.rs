//! Preprocessing, the two-stage training schedule, evaluation and editing.

pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use config::Config;
pub use data::{preprocess, PairRecord, PreprocessOutput};
pub use model::TrainState;
pub use train::{
    edit, evaluate, inpaint_step, pas_step, prepare, run_schedule, train_and_evaluate, train_step, EvalMetrics, Phase,
    Prepared, RunOutcome, StepLog,
};
