//! Class-incremental training of dense networks with gradient correlation
//! subspace learning (GCSL).
//!
//! After each task the engine measures, per hidden layer, the mean outer
//! product of the loss gradient with respect to the layer output. The next
//! task may only move that layer's weights inside the span of the
//! eigenvectors with the smallest eigenvalues, the directions the previous
//! task's loss barely reacts to.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gcsl;
pub mod linalg;
pub mod nn;

pub use data::{AccumulativeValidation, Dataset, DatasetPair, Split, TaskSpec, TaskView};
pub use error::{Error, Result};
pub use experiments::{preset, run_experiment, ExperimentConfig, ExperimentOutcome, Mode, RunResult, SummaryStats};
pub use gcsl::{CorrelationAccumulator, EigenSelection, GcslModel, SubspaceBasis};
pub use linalg::{Matrix, Rng};
pub use nn::{LayerParams, Network, OptimizerKind, OptimizerSpec};
