//! Monte Carlo experiments, metrics, scenario configuration and CSV output.

pub mod bench;
pub mod config;
pub mod experiment;
pub mod metrics;

use thiserror::Error;

pub use config::{AdcFrames, ConfigErrors, EstimatorKind, ScenarioConfig, SweepParameter, SweepPoint};
pub use experiment::{
    bound_report, run_experiment, write_bound_csv, write_outputs, ExperimentReport, MetricKind,
    MetricRow,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(#[from] ConfigErrors),
    #[error("channel: {0}")]
    Channel(#[from] crate::channel::ChannelError),
    #[error("signal: {0}")]
    Signal(#[from] crate::signal::SignalError),
    #[error("estimator: {0}")]
    Estimator(#[from] crate::estimators::EstimatorError),
    #[error("bounds: {0}")]
    Bounds(#[from] crate::bounds::BoundsError),
    #[error("combiner: {0}")]
    Combiner(#[from] crate::combiner::CombinerError),
    #[error("metric: {0}")]
    Metric(#[from] metrics::MetricError),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}
