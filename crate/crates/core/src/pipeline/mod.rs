//! Synthetic data, training and evaluation drivers, file formats and
//! renders.

pub mod checkpoint;
pub mod config;
pub mod integrators;
pub mod render;
mod run;
pub mod selftest;
pub mod synth;
pub mod tensorfile;

pub use config::{DatasetSpec, RunConfig};
pub use run::{
    evaluate, evaluation_pair, register, train, train_from, training_pair, DirectionSummary,
    EvalRow, EvalTable, HistoryEntry, MeanStd, RegistrationResult, TrainOutcome,
};
pub use synth::{make_synthetic_pair, PairKind, SyntheticPair};
