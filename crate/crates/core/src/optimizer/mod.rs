//! Sequential model-based search over merge weights.
//!
//! The sampler is a Tree-structured Parzen Estimator: scored trials are
//! split at the top quantile, good/bad densities are fit per dimension
//! ([`kde`], [`tpe`]), and the next point maximizes the density ratio among
//! candidates drawn from the good model. [`study`] persists every trial to
//! an append-only JSONL log; [`search`] runs the batched
//! suggest → evaluate → record loop plus the final dev-budget re-scoring;
//! [`grid`] is the exhaustive baseline the sampler is meant to beat.

use thiserror::Error;

use crate::space::SpaceError;

pub mod grid;
pub mod kde;
pub mod search;
pub mod study;
pub mod tpe;

pub use grid::{grid_points, grid_search, GridOptions, GridReport, DEFAULT_GRID_CAP};
pub use kde::{
    BandwidthRule, TruncatedGaussianKde, BANDWIDTH_FLOOR_FRACTION, SCOTT_CLIP_MAX_DIVISOR,
};
pub use search::{run_search, PhaseTimings, RunOptions, SearchReport};
pub use study::{Budgets, Study, StudyWriter, TpeConfig, Trial, TrialState};
pub use tpe::{suggest, suggest_batch, DensityModelPair};

/// Errors raised by study management and the search loop.
#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid sampler configuration: {0}")]
    BadSampler(String),
    #[error("invalid budgets: {0}")]
    BadBudgets(String),
    #[error("trial index {got} leaves a gap (next dense index is {expected})")]
    IndexGap { expected: usize, got: usize },
    #[error("trial {index}: score must be finite")]
    NonFiniteScore { index: usize },
    #[error("trial {index}: point lies outside the search space")]
    PointOutOfBounds { index: usize },
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("grid of {points} points exceeds the cap of {cap}")]
    BudgetOverflow { points: u128, cap: u128 },
    #[error("study log {path}, line {line}: {what}")]
    Corrupt {
        path: String,
        line: usize,
        what: String,
    },
    #[error("every trial in batch {batch} failed; aborting the search")]
    BatchExhausted { batch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
