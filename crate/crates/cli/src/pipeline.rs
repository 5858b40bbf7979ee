//! Steps shared by the command line and the job runner.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use colosla_core::docio::{parse_document, scrub_pii, PiiConfig, RawDocument, SanitizedDocument};
use colosla_core::extraction::{
    extract_rules, DeterministicBackend, Extraction, ExtractionConfig, ExtractionError, ReasoningBackend,
    RemoteBackend, RemoteConfig,
};
use colosla_core::labeler::{build_dataset, DatasetConfig, LabeledDataset};
use colosla_core::model::{build_model, load_checkpoint, save_checkpoint, train, EvaluationReport, Model, ModelConfig, Predictor, TrainConfig};
use colosla_core::rulesdb::{example_rules, RuleSet};
use colosla_core::stream::{
    to_finance, to_ops, Contract, FinanceView, OpsView, Playbook, PredictionEvent, RiskThresholds,
    RulePersistencePredictor, StepOutput, StreamConfig, StreamEngine,
};
use colosla_core::telemetry::{read_points, simulate, SimConfig, TelemetryPoint};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(CliError::io(path))
}

/// Rules from a JSON-lines file, or the built-in example contract.
pub fn load_rules(path: Option<&Path>) -> Result<RuleSet, CliError> {
    match path {
        Some(p) => Ok(RuleSet::from_jsonl(&read_text(p)?)?),
        None => Ok(example_rules()),
    }
}

pub fn rules_jsonl(rules: &RuleSet) -> Result<String, CliError> {
    let mut out = String::new();
    for r in rules {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse and scrub one document.
pub fn ingest(raw: &RawDocument, pii: &PiiConfig, out_dir: &Path) -> Result<(SanitizedDocument, PathBuf), CliError> {
    let parsed = parse_document(raw)?;
    let (doc, map) = scrub_pii(&parsed, pii)?;
    let path = doc.write(out_dir)?;
    map.append_to(&out_dir.join("redaction_maps.jsonl"))?;
    Ok((doc, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Deterministic,
    /// Chat-completion endpoint from SLA_BACKEND_URL.
    Remote,
}

pub fn backend(choice: BackendChoice) -> Result<Box<dyn ReasoningBackend>, CliError> {
    match choice {
        BackendChoice::Deterministic => Ok(Box::new(DeterministicBackend)),
        BackendChoice::Remote => {
            let cfg = RemoteConfig::from_env()
                .ok_or_else(|| CliError::Config("SLA_BACKEND_URL is not set".into()))?;
            Ok(Box::new(RemoteBackend::new(cfg)?))
        }
    }
}

/// Run extraction; an incomplete run still returns its partial result.
pub fn extract(doc: &SanitizedDocument, choice: BackendChoice) -> Result<Result<Extraction, Extraction>, CliError> {
    let backend = backend(choice)?;
    match extract_rules(doc, backend.as_ref(), &ExtractionConfig::default()) {
        Ok(x) => Ok(Ok(x)),
        Err(ExtractionError::Incomplete(x)) => Ok(Err(*x)),
        Err(e) => Err(e.into()),
    }
}

/// Simulator request in days and hours rather than seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub seed: u64,
    pub racks: usize,
    pub days: f64,
    /// One violation episode is scheduled per slot.
    pub slot_hours: f64,
    pub customer: String,
}

impl Default for SimParams {
    /// The reference training set: about 5,000 labeled windows.
    fn default() -> Self {
        Self { seed: 42, racks: 3, days: 6.0, slot_hours: 8.0, customer: "Customer_A".into() }
    }
}

impl SimParams {
    pub fn config(&self) -> SimConfig {
        let mut cfg = SimConfig::scheduled(
            self.seed,
            self.racks,
            (self.days * 86_400.0).round() as i64,
            (self.slot_hours * 3600.0).round() as i64,
        );
        cfg.customer = self.customer.clone();
        cfg
    }

    pub fn run(&self, rules: &RuleSet) -> Result<Vec<TelemetryPoint>, CliError> {
        Ok(simulate(&self.config(), &rules.for_customer(&self.customer))?)
    }
}

pub fn label(points: &[TelemetryPoint], rules: &RuleSet) -> Result<LabeledDataset, CliError> {
    Ok(build_dataset(points, rules, &DatasetConfig::default())?)
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    /// Used when no dataset is given.
    pub simulation: SimParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainFile {
    /// `default` or a TOML path.
    pub fn load(spec: &str) -> Result<TrainFile, CliError> {
        if spec == "default" {
            return Ok(TrainFile::default());
        }
        toml::from_str(&read_text(Path::new(spec))?).map_err(|e| CliError::Config(format!("{spec}: {e}")))
    }
}

pub fn train_model(
    dataset: &LabeledDataset,
    rules: &RuleSet,
    customer: &str,
    file: &TrainFile,
) -> Result<(Model, EvaluationReport), CliError> {
    let mut mcfg = file.model.clone();
    mcfg.rule_heads = ModelConfig::for_rules(rules, customer).rule_heads;
    if mcfg.rule_heads.is_empty() {
        return Err(CliError::Invalid(format!("no rules for customer {customer}")));
    }
    let model = build_model(mcfg)?;
    Ok(train(model, dataset, &file.train)?)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    save_checkpoint(model, path).map_err(|e| CliError::Model(e.into()))
}

/// A checkpoint, or the persistence stub when `model` is `stub`.
pub fn predictor(model: &str, rules: &RuleSet, customer: &str, cfg: &StreamConfig) -> Result<Arc<dyn Predictor>, CliError> {
    if model == "stub" {
        let order = ModelConfig::for_rules(rules, customer).rule_heads;
        let stub = RulePersistencePredictor::new(&rules.for_customer(customer), &order, cfg.lookback, cfg.cadence_s)
            .ok_or_else(|| CliError::Invalid("stub needs a lookback covering every aggregation window".into()))?;
        return Ok(Arc::new(stub));
    }
    Ok(Arc::new(load_checkpoint(Path::new(model))?))
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryPoint>, CliError> {
    Ok(read_points(path)?)
}

/// Everything one offline inference run produces.
#[derive(Debug, Default)]
pub struct InferOutput {
    pub events: Vec<PredictionEvent>,
    pub audit: Vec<colosla_core::stream::AuditRecord>,
    pub finance: Vec<FinanceView>,
    pub ops: Vec<OpsView>,
}

pub fn infer(
    points: &[TelemetryPoint],
    rules: &RuleSet,
    model: &str,
    contracts: &BTreeMap<String, Contract>,
    cfg: StreamConfig,
) -> Result<InferOutput, CliError> {
    let mut by_customer: BTreeMap<&str, Vec<TelemetryPoint>> = BTreeMap::new();
    for p in points {
        by_customer.entry(p.customer.as_str()).or_default().push(p.clone());
    }
    let mut out = InferOutput::default();
    for (customer, pts) in by_customer {
        let own = rules.for_customer(customer);
        let mut engine = StreamEngine::new(customer, predictor(model, rules, customer, &cfg)?, &own, cfg)?;
        let mut step: StepOutput = engine.step(&pts)?;
        let tail = engine.flush()?;
        step.events.extend(tail.events);
        step.audit.extend(tail.audit);
        let playbook = Playbook::defaults_for(&own);
        for e in &step.events {
            if contracts.contains_key(customer) {
                out.finance.push(to_finance(e, contracts, &own)?);
            }
            out.ops.push(to_ops(e, &playbook, &RiskThresholds::default()));
        }
        out.events.extend(step.events);
        out.audit.extend(step.audit);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub fn append_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    if lines.is_empty() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(CliError::io(path))?;
    for l in lines {
        writeln!(f, "{l}").map_err(CliError::io(path))?;
    }
    f.sync_data().map_err(CliError::io(path))
}
