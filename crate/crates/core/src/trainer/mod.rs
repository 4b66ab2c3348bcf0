//! SGD training per fold and orchestration of whole protocols.

mod config;
mod fold;
mod inputs;
mod run;
mod sgd;

pub use config::{ExperimentConfig, TrainConfig};
pub use fold::{evaluate_fold, predict_examples, train_fold, Features, TrainStats, Trainer};
pub use inputs::{cached_clip_flow, clip_flow, select_apex, stack, Example, FlowInputs};
pub use run::{
    fold_dir, reaggregate, run_protocol, worker_count, FoldResult, ProtocolReport, RoundReport, THREADS_ENV,
};
pub use sgd::Sgd;
