use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("--seed is required for `{0}`")]
    MissingSeed(&'static str),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Records(#[from] perception_core::records::RecordError),
    #[error(transparent)]
    Corpus(#[from] perception_core::corpus::CorpusError),
    #[error(transparent)]
    Plan(#[from] perception_core::plan::PlanError),
    #[error(transparent)]
    Simulation(#[from] perception_core::simulate::SimulationError),
    #[error(transparent)]
    Model(#[from] perception_core::model::ModelError),
    #[error(transparent)]
    Correction(#[from] perception_core::correction::CorrectionError),
    #[error(transparent)]
    Render(#[from] perception_core::render::RenderError),
    #[error(transparent)]
    Feature(#[from] perception_core::features::FeatureError),
    #[error(transparent)]
    Service(#[from] perception_service::ServiceError),
    #[error("unknown study {0}")]
    UnknownStudy(String),
}

impl CliError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingSeed(_) => "missing_seed",
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Input(_) => "invalid_input",
            CliError::Records(_) => "records",
            CliError::Corpus(_) => "corpus",
            CliError::Plan(_) => "plan",
            CliError::Simulation(_) => "simulation",
            CliError::Model(_) => "model",
            CliError::Correction(_) => "correction",
            CliError::Render(_) => "render",
            CliError::Feature(_) => "features",
            CliError::Service(_) => "service",
            CliError::UnknownStudy(_) => "unknown_study",
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
