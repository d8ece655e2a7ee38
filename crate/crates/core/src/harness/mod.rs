//! Experiment configuration, checkpoints, orchestration, reports and the
//! command-line front end.

pub mod cli;
mod config;
mod experiment;
pub mod report;
mod weights;

pub use config::{DatasetSource, ExperimentConfig, ExperimentKind};
pub use experiment::{
    load_corpus, run_experiment, run_experiment_with, train_members, Corpus, CorpusRow, ReportBundle, RunOptions,
};
pub use report::confidence_report;
pub use weights::{load_model, save_model};
