//! Experiment wiring: configuration, topology resolution, running servers
//! and clients on the simulated or TCP transport, comparison and export.

mod compare;
mod config;
mod export;
mod run;

use thiserror::Error;

pub use compare::{best_final_loss, compare, Comparison};
pub use config::{
    Assignment, CsvSource, DataSource, ExperimentConfig, ServerSpec, SyntheticSource, TrainSpec,
};
pub use export::{export, ExportPaths, CLIENT_LOSS_HEADER, DELIVERY_HEADER, SERVER_LOSS_HEADER};
pub use run::{
    client_id, join_as_client, prepare, run_experiment, serve_as_server, ClientPlan, ClientReport,
    MetricsBundle, Prepared, ServerReport, Timings,
};

use crate::data::DataError;
use crate::server::ServerError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("cannot compare runs: {0}")]
    MismatchedConfigs(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("server error: {0}")]
    Server(#[from] ServerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl HarnessError {
    /// True for problems with the configuration or its inputs, as opposed to
    /// failures while the experiment runs.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Topology(_)
                | HarnessError::MismatchedConfigs(_)
                | HarnessError::Data(_)
        )
    }
}
