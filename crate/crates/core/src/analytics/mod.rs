//! Evaluation metrics, equity, forecasting and policy attribution.

pub mod attribution;
pub mod equity;
pub mod forecast;
pub mod metrics;
pub mod shapley;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("day {day} is out of range for a trajectory of {len} snapshots")]
    OutOfRange { day: usize, len: usize },
    #[error("series has {len} points, at least {need} required")]
    TooShort { len: usize, need: usize },
    #[error("equity is undefined: no region improved")]
    UndefinedEquity,
    #[error("{m} features exceed the exact-enumeration limit of {max}")]
    TooManyFeatures { m: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("dataset has {rows} rows, at least {min} required")]
    TooFewRows { rows: usize, min: usize },
    #[error("region #{0} has no living population")]
    EmptyRegion(usize),
}

pub use attribution::{build_attribution_model, AttributionDataset, ForestConfig, StrictFirstModel};
pub use equity::{equity_coefficient, gini, improvements, Equity, ImprovementVector};
pub use forecast::{forecast_cumulative, mean_recent_increment};
pub use metrics::{active_case_rate, death_rate, incidence_rate, MetricSeries};
pub use shapley::{shapley_values, MAX_EXACT_FEATURES};
