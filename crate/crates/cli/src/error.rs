use std::path::PathBuf;

use colosla_core::docio::DocError;
use colosla_core::extraction::ExtractionError;
use colosla_core::labeler::LabelError;
use colosla_core::model::ModelError;
use colosla_core::rulesdb::StoreError;
use colosla_core::stream::StreamError;
use colosla_core::telemetry::{SimError, TelemetryIoError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Doc(#[from] DocError),
    #[error("extraction: {0}")]
    Extraction(#[from] ExtractionError),
    #[error("extraction incomplete: {}", .0.join("; "))]
    Incomplete(Vec<String>),
    #[error("labeling: {0}")]
    Label(#[from] LabelError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("rules: {0}")]
    Store(#[from] StoreError),
    #[error("stream: {0}")]
    Stream(#[from] StreamError),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("telemetry: {0}")]
    Telemetry(#[from] TelemetryIoError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("audit chain broken at record {index}: {reason}")]
    ChainBroken { index: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// The message on one line, for machine parsing.
    pub fn one_line(&self) -> String {
        self.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
    }
}
