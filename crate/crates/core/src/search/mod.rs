//! Latency-constrained evolutionary architecture search.

mod evolve;
mod latency;
mod space;

use thiserror::Error;

pub use evolve::{
    evolve, history_csv, initial_population, CandidateRow, FitnessRecord, GenerationSummary, SearchConfig, SearchResult,
    DEFAULT_BUDGET_US,
};
pub use latency::{
    latency_table_csv, measure_latency, parse_latency_table, LatencyConfig, LatencySource, LatencyStats, MIN_FRAMES,
    MIN_WARMUP,
};
pub use space::{mutate_genome, sample_genome, GenomeSpace};

use crate::model::ModelError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no shape-legal genome after {0} retries")]
    RetriesExhausted(usize),
    #[error("budget infeasible: fastest candidate took {fastest_us:.1} us per frame, budget is {budget_us:.1} us")]
    BudgetInfeasible { fastest_us: f64, budget_us: f64 },
    #[error("no recorded latency for genome {0}")]
    ReplayMissing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
