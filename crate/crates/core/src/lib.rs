pub mod canonical;
pub mod rulesdb;
pub mod telemetry;
pub mod labeler;
pub mod model;
pub mod stream;
pub mod docio;
pub mod extraction;

pub use docio::{RawDocument, SanitizedDocument};
pub use extraction::{CandidateRule, Extraction};
pub use labeler::{LabeledDataset, LabeledExample};
pub use model::{Model, ModelConfig, Predictor, TrainConfig};
pub use rulesdb::{Interval, Metric, RuleSet, RuleSpec, ThresholdBands, ViolationLevel};
pub use stream::{AuditRecord, FinanceView, OpsView, PredictionEvent, RiskLevel};
pub use telemetry::TelemetryPoint;
