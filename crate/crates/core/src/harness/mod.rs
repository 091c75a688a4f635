//! Data generation, training, evaluation and experiment orchestration.

pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod train;

pub use config::KvConfig;
pub use data::{
    gen_synthetic_dataset, Dataset, SyntheticTask, SyntheticTaskSpec, TokenPrior, Utterance,
};
pub use eval::{evaluate, EvalOptions, MetricsRow};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentResult, System};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use train::{train, train_from, EpochReport, TrainConfig, TrainOutcome};
