//! Per-example importance scores for dataset pruning.
//!
//! The crate trains small fully connected classifiers from scratch and computes
//! GraNd (expected per-example gradient norm), EL2N (expected error norm),
//! input-norm, forgetting-count and random scores over several independent
//! runs. On top of that sit the pruning sweep, rank-correlation analysis and a
//! report writer that emits CSV and SVG.
//!
//! Checkpoints are addressed by step and restoring an explicit step never
//! falls back to the latest one, so "scores at initialization" really are
//! computed from untrained parameters.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod scores;
pub mod seed;
pub mod stats;
pub mod train;

pub use checkpoint::CheckpointStore;
pub use data::{Dataset, Example, InputSpace, Split};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, SweepResult, SweepRow};
pub use nn::{Activation, Init, ModelSpec, Params, Tensor2};
pub use oracle::LinearModel;
pub use scores::{ScoreKind, ScoreTable};
pub use stats::CorrelationMatrix;
pub use train::{CorrectnessMatrix, TrainConfig, TrainResult};
