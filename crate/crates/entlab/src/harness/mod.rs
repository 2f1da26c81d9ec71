//! Experiment orchestration: configuration, deterministic seeded runs, file
//! outputs and verification suites.

mod config;
mod io;
mod plotdata;
mod runner;
mod verify;

pub use config::{Algorithm, LossKind, RunConfig, CONFIG_KEYS};
pub use io::{read_covariances_csv, read_steps_csv, strict_read_csv, write_fit_json};
pub use plotdata::{emit_plot_data, PlotKind};
pub use runner::{fit_and_predict, run_experiment, FitPrediction, RunOutput};
pub use verify::{verify_dynamics, DynamicsReport, FirstOrderSummary, DEFAULT_ETA_SCHEDULE};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Advantage(#[from] crate::advantage::AdvantageError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Fit(#[from] crate::fitlab::FitError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
