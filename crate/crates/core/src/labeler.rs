//! Programmatic labeling: apply the rules to telemetry windows.
//!
//! A window's label for a rule is the most severe band reached by any of
//! the rule's aggregates over the horizon. Aggregation sub-windows tile
//! the horizon without overlap, starting at its first step; a trailing
//! remainder shorter than the aggregation window is not evaluated.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::{self, sha256_hex};
use crate::rulesdb::{band_of, Metric, RuleSet, RuleSpec, ViolationLevel};
use crate::telemetry::{
    build_matrices, make_windows, telemetry_digest, TelemetryError, TelemetryPoint, Window, WindowConfig,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("rule {rule_id}: aggregation window {window_s}s is not a multiple of the {cadence_s}s cadence")]
    IndivisibleAggregation { rule_id: String, window_s: u64, cadence_s: u64 },
    #[error("rule {rule_id}: aggregation window is longer than the {horizon}-step horizon")]
    HorizonTooShort { rule_id: String, horizon: usize },
    #[error("rule {rule_id}: window has no {metric} channel")]
    MissingChannel { rule_id: String, metric: Metric },
    #[error("window has no horizon; only training windows can be labeled")]
    MissingFuture,
    #[error("no rules for customer {0}")]
    NoRules(String),
    #[error("series too short: {0}")]
    SeriesTooShort(TelemetryError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("telemetry {0} is not available for relabeling")]
    TelemetryMissing(String),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

/// Rule aggregates over the horizon: `(sub-window start timestamp, mean)`.
pub fn horizon_aggregates(window: &Window, rule: &RuleSpec) -> Result<Vec<(i64, f64)>, LabelError> {
    let future = window.future.as_ref().ok_or(LabelError::MissingFuture)?;
    if rule.aggregation_window_s == 0 || rule.aggregation_window_s % window.cadence_s != 0 {
        return Err(LabelError::IndivisibleAggregation {
            rule_id: rule.rule_id.clone(),
            window_s: rule.aggregation_window_s,
            cadence_s: window.cadence_s,
        });
    }
    let sub = (rule.aggregation_window_s / window.cadence_s) as usize;
    if sub > future.len() {
        return Err(LabelError::HorizonTooShort { rule_id: rule.rule_id.clone(), horizon: future.len() });
    }
    let col = window
        .channel_index(rule.metric)
        .ok_or_else(|| LabelError::MissingChannel { rule_id: rule.rule_id.clone(), metric: rule.metric })?;
    Ok(future
        .chunks_exact(sub)
        .enumerate()
        .map(|(k, rows)| {
            let mean = rows.iter().map(|r| r[col]).sum::<f64>() / sub as f64;
            (window.end + (k * sub) as i64 * window.cadence_s as i64, mean)
        })
        .collect())
}

/// Most severe band over the horizon aggregates.
pub fn label_window(window: &Window, rule: &RuleSpec) -> Result<ViolationLevel, LabelError> {
    Ok(horizon_aggregates(window, rule)?
        .into_iter()
        .map(|(_, v)| band_of(rule, v))
        .max()
        .unwrap_or_default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub split: Split,
    pub window: Window,
    pub labels: BTreeMap<String, ViolationLevel>,
    pub future_aggregates: BTreeMap<String, Vec<(i64, f64)>>,
    pub rules_version: BTreeMap<String, u32>,
}

impl LabeledExample {
    /// The rule aggregate at the end of the horizon (forecast target).
    pub fn forecast_target(&self, rule_id: &str) -> Option<f64> {
        self.future_aggregates.get(rule_id)?.last().map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.70, validation: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub windowing: WindowConfig,
    pub split: SplitFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rules_digest: String,
    pub telemetry_digest: String,
    pub config: DatasetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub rule_ids: Vec<String>,
    pub examples: Vec<LabeledExample>,
    pub provenance: Provenance,
}

/// Manifest written next to the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub provenance: Provenance,
    pub rule_ids: Vec<String>,
    pub counts: BTreeMap<Split, usize>,
    pub label_counts: BTreeMap<String, [usize; 3]>,
    pub dataset_digest: String,
}

impl LabeledDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Per rule, count of examples labeled None / L1 / L2.
    pub fn label_counts(&self) -> BTreeMap<String, [usize; 3]> {
        let mut counts: BTreeMap<String, [usize; 3]> =
            self.rule_ids.iter().map(|id| (id.clone(), [0; 3])).collect();
        for ex in &self.examples {
            for (id, level) in &ex.labels {
                if let Some(c) = counts.get_mut(id) {
                    c[level.index()] += 1;
                }
            }
        }
        counts
    }

    fn lines(&self) -> impl Iterator<Item = String> + '_ {
        self.examples
            .iter()
            .map(|e| canonical::to_canonical_string(e).expect("example serializes"))
    }

    /// Digest over the canonical JSON-lines encoding of the examples.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for line in self.lines() {
            bytes.extend(line.bytes());
            bytes.push(b'\n');
        }
        sha256_hex(&bytes)
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.split).or_insert(0) += 1;
        }
        DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            provenance: self.provenance.clone(),
            rule_ids: self.rule_ids.clone(),
            counts,
            label_counts: self.label_counts(),
            dataset_digest: self.digest(),
        }
    }

    /// Write `<stem>.jsonl` and `<stem>.manifest.json`.
    pub fn write(&self, jsonl_path: &Path) -> Result<PathBuf, LabelError> {
        if let Some(dir) = jsonl_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(jsonl_path)?);
        for line in self.lines() {
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let manifest_path = manifest_path(jsonl_path);
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&self.manifest()).map_err(|e| LabelError::Format(e.to_string()))?,
        )?;
        Ok(manifest_path)
    }

    pub fn read(jsonl_path: &Path) -> Result<LabeledDataset, LabelError> {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(manifest_path(jsonl_path))?)
            .map_err(|e| LabelError::Format(e.to_string()))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(LabelError::Format(format!("unsupported version {}", manifest.format_version)));
        }
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(std::fs::File::open(jsonl_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(
                serde_json::from_str(&line).map_err(|e| LabelError::Format(format!("line {}: {e}", i + 1)))?,
            );
        }
        let dataset =
            LabeledDataset { rule_ids: manifest.rule_ids, examples, provenance: manifest.provenance };
        if dataset.digest() != manifest.dataset_digest {
            return Err(LabelError::Format("dataset digest does not match manifest".into()));
        }
        Ok(dataset)
    }
}

pub fn manifest_path(jsonl_path: &Path) -> PathBuf {
    jsonl_path.with_extension("manifest.json")
}

fn label_example(window: Window, rules: &RuleSet, split: Split) -> Result<LabeledExample, LabelError> {
    let mut labels = BTreeMap::new();
    let mut future_aggregates = BTreeMap::new();
    for rule in rules {
        let aggs = horizon_aggregates(&window, rule)?;
        let level = aggs.iter().map(|&(_, v)| band_of(rule, v)).max().unwrap_or_default();
        labels.insert(rule.rule_id.clone(), level);
        future_aggregates.insert(rule.rule_id.clone(), aggs);
    }
    Ok(LabeledExample { split, window, labels, future_aggregates, rules_version: rules.versions() })
}

/// Chronological split boundaries over window start times. Windows that
/// would straddle a boundary are purged so the splits never share a
/// timestamp.
fn assign_splits(windows: &[Window], fractions: SplitFractions) -> Vec<Option<Split>> {
    let mut starts: Vec<i64> = windows.iter().map(|w| w.start).collect();
    starts.sort_unstable();
    starts.dedup();
    if starts.is_empty() {
        return Vec::new();
    }
    let at = |f: f64| starts[((starts.len() as f64 * f).floor() as usize).min(starts.len() - 1)];
    let t1 = at(fractions.train);
    let t2 = at(fractions.train + fractions.validation);
    windows
        .iter()
        .map(|w| {
            let end = w.horizon_end();
            if end <= t1 {
                Some(Split::Train)
            } else if w.start >= t1 && end <= t2 {
                Some(Split::Validation)
            } else if w.start >= t2 {
                Some(Split::Test)
            } else {
                None
            }
        })
        .collect()
}

fn windows_for(
    points: &[TelemetryPoint],
    rules: &RuleSet,
    cfg: &DatasetConfig,
) -> Result<Vec<(Window, RuleSet)>, LabelError> {
    let matrices = build_matrices(points, cfg.windowing.cadence_s)?;
    let mut out = Vec::new();
    let mut short = None;
    for matrix in &matrices {
        let customer_rules = rules.for_customer(&matrix.customer);
        if customer_rules.is_empty() {
            return Err(LabelError::NoRules(matrix.customer.clone()));
        }
        match make_windows(matrix, &cfg.windowing) {
            Ok(ws) => out.extend(ws.into_iter().map(|w| (w, customer_rules.clone()))),
            Err(e @ TelemetryError::SeriesTooShort { .. }) => short = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    if out.is_empty() {
        if let Some(e) = short {
            return Err(LabelError::SeriesTooShort(e));
        }
    }
    out.sort_by(|a, b| (a.0.start, &a.0.customer, &a.0.rack_id).cmp(&(b.0.start, &b.0.customer, &b.0.rack_id)));
    Ok(out)
}

/// Window the telemetry, label every window against every rule of its
/// customer, and split chronologically.
pub fn build_dataset(
    points: &[TelemetryPoint],
    rules: &RuleSet,
    cfg: &DatasetConfig,
) -> Result<LabeledDataset, LabelError> {
    let windows = windows_for(points, rules, cfg)?;
    let splits = assign_splits(&windows.iter().map(|(w, _)| w.clone()).collect::<Vec<_>>(), cfg.split);
    let mut examples = Vec::with_capacity(windows.len());
    for ((window, customer_rules), split) in windows.into_iter().zip(splits) {
        if let Some(split) = split {
            examples.push(label_example(window, &customer_rules, split)?);
        }
    }
    Ok(LabeledDataset {
        rule_ids: rules.ids(),
        examples,
        provenance: Provenance {
            rules_digest: rules.digest(),
            telemetry_digest: telemetry_digest(points),
            config: *cfg,
        },
    })
}

/// Source of archived telemetry, looked up by digest.
pub trait TelemetrySource {
    fn load(&self, digest: &str) -> Option<Vec<TelemetryPoint>>;
}

impl TelemetrySource for HashMap<String, Vec<TelemetryPoint>> {
    fn load(&self, digest: &str) -> Option<Vec<TelemetryPoint>> {
        self.get(digest).cloned()
    }
}

/// Directory of `<digest>.csv` telemetry files.
#[derive(Debug, Clone)]
pub struct TelemetryArchive {
    pub dir: PathBuf,
}

impl TelemetryArchive {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Store points under their digest; returns the digest.
    pub fn store(&self, points: &[TelemetryPoint]) -> Result<String, LabelError> {
        std::fs::create_dir_all(&self.dir)?;
        let digest = telemetry_digest(points);
        let path = self.dir.join(format!("{digest}.csv"));
        if !path.exists() {
            let file = std::fs::File::create(&path)?;
            crate::telemetry::write_csv(points, file).map_err(|e| LabelError::Format(e.to_string()))?;
        }
        Ok(digest)
    }
}

impl TelemetrySource for TelemetryArchive {
    fn load(&self, digest: &str) -> Option<Vec<TelemetryPoint>> {
        let file = std::fs::File::open(self.dir.join(format!("{digest}.csv"))).ok()?;
        crate::telemetry::read_csv(file).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelReport {
    /// Per surviving rule: number of examples whose label changed.
    pub changed: BTreeMap<String, usize>,
    pub added: Vec<String>,
    pub removed: Vec<String>,
}

/// Re-run the labeler over the original telemetry with new rules. Windows
/// and splits are unchanged; labels and rule versions follow `new_rules`.
pub fn relabel(
    dataset: &LabeledDataset,
    new_rules: &RuleSet,
    source: &dyn TelemetrySource,
) -> Result<(LabeledDataset, RelabelReport), LabelError> {
    let digest = &dataset.provenance.telemetry_digest;
    let points = source.load(digest).ok_or_else(|| LabelError::TelemetryMissing(digest.clone()))?;
    if &telemetry_digest(&points) != digest {
        return Err(LabelError::TelemetryMissing(digest.clone()));
    }
    let mut relabeled = build_dataset(&points, new_rules, &dataset.provenance.config)?;
    debug_assert_eq!(relabeled.examples.len(), dataset.examples.len());

    let old_ids: Vec<&String> = dataset.rule_ids.iter().collect();
    let mut report = RelabelReport {
        changed: BTreeMap::new(),
        added: new_rules.ids().into_iter().filter(|id| !old_ids.contains(&id)).collect(),
        removed: dataset.rule_ids.iter().filter(|id| new_rules.get(id).is_none()).cloned().collect(),
    };
    for id in new_rules.ids().into_iter().filter(|id| old_ids.contains(&id)) {
        let n = dataset
            .examples
            .iter()
            .zip(&relabeled.examples)
            .filter(|(a, b)| a.labels.get(&id) != b.labels.get(&id))
            .count();
        report.changed.insert(id, n);
    }
    relabeled.provenance.telemetry_digest = digest.clone();
    Ok((relabeled, report))
}
