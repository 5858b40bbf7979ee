//! Per-customer transformer with one pooled attention head per SLA rule.

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod layout;
pub mod linalg;
mod network;
pub mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::sha256_hex;
use crate::rulesdb::{Metric, RuleSet, ViolationLevel};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use eval::{evaluate, EvaluationReport, RuleReport};
pub use gradcheck::{cross_rule_gradient_max, grad_check, GradCheckReport};
pub use layout::{Init, Layout, TensorSpec};
pub use network::BackwardFault;
pub use train::{train, ClassWeights, LossRecord, LrSchedule, TrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset has no usable examples")]
    DatasetEmpty,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("rule {0} has no label in the dataset")]
    MissingRule(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub n_encoder_layers: usize,
    pub n_backbone_heads: usize,
    pub ffn_width: usize,
    /// Hidden width of each rule's classifier and forecaster stacks.
    pub head_hidden: usize,
    pub rule_heads: Vec<String>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            lookback: 60,
            horizon: 90,
            d_model: 32,
            n_encoder_layers: 2,
            n_backbone_heads: 4,
            ffn_width: 64,
            head_hidden: 96,
            rule_heads: vec!["CUST_A_PWR_01".into(), "CUST_A_TEMP_01".into(), "CUST_A_HUM_01".into()],
            dropout: 0.0,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Default architecture with heads ordered for `rules`.
    pub fn for_rules(rules: &RuleSet, customer: &str) -> Self {
        Self { rule_heads: head_order(rules, customer), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.channels == 0 || self.lookback == 0 || self.d_model == 0 {
            return bad("channels, lookback and d_model must be positive");
        }
        if self.n_backbone_heads == 0 || self.d_model % self.n_backbone_heads != 0 {
            return bad(&format!(
                "d_model {} not divisible by n_backbone_heads {}",
                self.d_model, self.n_backbone_heads
            ));
        }
        if self.ffn_width == 0 || self.head_hidden == 0 {
            return bad("ffn_width and head_hidden must be positive");
        }
        if self.rule_heads.is_empty() {
            return bad("at least one rule head is required");
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.rule_heads {
            if !seen.insert(id) {
                return bad(&format!("duplicate rule head {id}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Head order: power, temperature, humidity, then rule id.
pub fn head_order(rules: &RuleSet, customer: &str) -> Vec<String> {
    let rank = |m: Metric| Metric::ALL.iter().position(|x| *x == m).unwrap_or(usize::MAX);
    let mut heads: Vec<(usize, String)> =
        rules.for_customer(customer).iter().map(|r| (rank(r.metric), r.rule_id.clone())).collect();
    heads.sort();
    heads.into_iter().map(|(_, id)| id).collect()
}

/// One rule head's output for one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleOutput {
    pub logits: [f64; 3],
    pub probs: [f64; 3],
    /// Horizon-end aggregate in metric units.
    pub forecast: f64,
}

impl RuleOutput {
    /// Most probable level; ties go to the more severe level.
    pub fn level(&self) -> ViolationLevel {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] >= self.probs[best] {
                best = i;
            }
        }
        ViolationLevel::from_index(best).expect("index < 3")
    }
}

/// Input and target standardization, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize, rules: usize) -> Self {
        Self {
            input_mean: vec![0.0; channels],
            input_std: vec![1.0; channels],
            target_mean: vec![0.0; rules],
            target_std: vec![1.0; rules],
        }
    }

    /// Fit from lookback rows and per-rule targets. Degenerate spreads
    /// fall back to 1.
    pub fn fit<'a>(
        lookbacks: impl Iterator<Item = &'a Vec<Vec<f64>>>,
        targets: &[Vec<f64>],
        channels: usize,
    ) -> Self {
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut n = 0usize;
        for lb in lookbacks {
            for row in lb {
                for (c, v) in row.iter().enumerate().take(channels) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        let moments = |s: f64, q: f64, n: usize| -> (f64, f64) {
            if n == 0 {
                return (0.0, 1.0);
            }
            let m = s / n as f64;
            let var = (q / n as f64 - m * m).max(0.0);
            let sd = var.sqrt();
            (m, if sd > 1e-9 { sd } else { 1.0 })
        };
        let (input_mean, input_std) = (0..channels).map(|c| moments(sum[c], sq[c], n)).unzip();
        let (target_mean, target_std) = targets
            .iter()
            .map(|t| moments(t.iter().sum(), t.iter().map(|v| v * v).sum(), t.len()))
            .unzip();
        Self { input_mean, input_std, target_mean, target_std }
    }

    pub(crate) fn normalize_input(&self, x: &[f64], channels: usize) -> Vec<f64> {
        x.chunks_exact(channels)
            .flat_map(|row| row.iter().enumerate().map(|(c, v)| (v - self.input_mean[c]) / self.input_std[c]))
            .collect()
    }

    pub fn normalize_target(&self, rule: usize, v: f64) -> f64 {
        (v - self.target_mean[rule]) / self.target_std[rule]
    }

    pub fn denormalize_target(&self, rule: usize, v: f64) -> f64 {
        v * self.target_std[rule] + self.target_mean[rule]
    }
}

/// Anything that maps a lookback matrix to per-rule outputs.
pub trait Predictor: Send + Sync {
    fn rule_ids(&self) -> &[String];
    fn lookback(&self) -> usize;
    fn version(&self) -> String;
    /// `lookback` is `L` rows of channel values.
    fn predict(&self, lookback: &[Vec<f64>]) -> Result<Vec<RuleOutput>, ModelError>;
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub normalizer: Normalizer,
    positional: Vec<f64>,
}

pub fn build_model(config: ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let layout = Layout::new(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = vec![0.0; layout.total];
    for t in &layout.tensors {
        let slot = &mut params[t.range()];
        match t.init {
            Init::Zeros => slot.fill(0.0),
            Init::Ones => slot.fill(1.0),
            Init::Glorot { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                slot.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
            }
        }
    }
    Model::from_parts(config, params, None)
}

impl Model {
    pub fn from_parts(config: ModelConfig, params: Vec<f64>, normalizer: Option<Normalizer>) -> Result<Model, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        let normalizer =
            normalizer.unwrap_or_else(|| Normalizer::identity(config.channels, config.rule_heads.len()));
        if normalizer.input_mean.len() != config.channels || normalizer.target_mean.len() != config.rule_heads.len() {
            return Err(ModelError::ShapeMismatch("normalizer does not match config".into()));
        }
        let positional = network::positional_encoding(config.lookback, config.d_model);
        Ok(Model { config, layout, params, normalizer, positional })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Parameter count per group, in layout order.
    pub fn param_audit(&self) -> Vec<(String, usize)> {
        self.layout.groups().into_iter().map(|g| {
            let n = self.layout.group_size(&g);
            (g, n)
        }).collect()
    }

    pub fn rule_index(&self, rule_id: &str) -> Option<usize> {
        self.config.rule_heads.iter().position(|r| r == rule_id)
    }

    pub(crate) fn flatten(&self, lookback: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        if lookback.len() != self.config.lookback {
            return Err(ModelError::ShapeMismatch(format!(
                "lookback has {} rows, model expects {}",
                lookback.len(),
                self.config.lookback
            )));
        }
        let mut x = Vec::with_capacity(self.config.lookback * self.config.channels);
        for row in lookback {
            if row.len() != self.config.channels {
                return Err(ModelError::ShapeMismatch(format!(
                    "row has {} channels, model expects {}",
                    row.len(),
                    self.config.channels
                )));
            }
            x.extend_from_slice(row);
        }
        Ok(x)
    }

    /// Outputs for a batch of lookback matrices, `[example][rule]`.
    pub fn forward(&self, batch: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<RuleOutput>>, ModelError> {
        batch
            .iter()
            .map(|lb| {
                let x = self.flatten(lb)?;
                Ok(self.forward_example(&x, None).0)
            })
            .collect()
    }

    /// Mean over examples of the summed per-rule loss. Forecast error is
    /// measured in standardized target units.
    pub fn loss(
        &self,
        outputs: &[Vec<RuleOutput>],
        labels: &[Vec<ViolationLevel>],
        targets: &[Vec<f64>],
        lambda: f64,
        class_weights: Option<&[[f64; 3]]>,
    ) -> Result<f64, ModelError> {
        let rules = self.config.rule_heads.len();
        if outputs.len() != labels.len() || outputs.len() != targets.len() {
            return Err(ModelError::ShapeMismatch("outputs, labels and targets differ in length".into()));
        }
        if outputs.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for ((out, lab), tgt) in outputs.iter().zip(labels).zip(targets) {
            if out.len() != rules || lab.len() != rules || tgt.len() != rules {
                return Err(ModelError::ShapeMismatch(format!("expected {rules} rules per example")));
            }
            for r in 0..rules {
                let std_err = (out[r].forecast - tgt[r]) / self.normalizer.target_std[r];
                let w = class_weights.map_or(1.0, |cw| cw[r][lab[r].index()]);
                total += rule_loss(&out[r].logits, lab[r].index(), w, std_err, lambda).0;
            }
        }
        Ok(total / outputs.len() as f64)
    }

    /// Short content hash of the parameters.
    pub fn version(&self) -> String {
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        format!("model-{}", &sha256_hex(&bytes)[..12])
    }

    /// Parameter ranges for each group.
    pub fn group_ranges(&self) -> BTreeMap<String, Vec<std::ops::Range<usize>>> {
        let mut map: BTreeMap<String, Vec<std::ops::Range<usize>>> = BTreeMap::new();
        for t in &self.layout.tensors {
            map.entry(t.group.clone()).or_default().push(t.range());
        }
        map
    }
}

impl Predictor for Model {
    fn rule_ids(&self) -> &[String] {
        &self.config.rule_heads
    }

    fn lookback(&self) -> usize {
        self.config.lookback
    }

    fn version(&self) -> String {
        Model::version(self)
    }

    fn predict(&self, lookback: &[Vec<f64>]) -> Result<Vec<RuleOutput>, ModelError> {
        let x = self.flatten(lookback)?;
        Ok(self.forward_example(&x, None).0)
    }
}

/// Weighted cross-entropy plus `lambda * err^2`; returns the loss and its
/// gradients w.r.t. the logits and the standardized forecast error.
pub(crate) fn rule_loss(logits: &[f64; 3], label: usize, weight: f64, err: f64, lambda: f64) -> (f64, [f64; 3], f64) {
    let lse = linalg::log_sum_exp(logits);
    let ce = lse - logits[label];
    let mut dl = [0.0; 3];
    for i in 0..3 {
        dl[i] = weight * ((logits[i] - lse).exp() - if i == label { 1.0 } else { 0.0 });
    }
    (weight * ce + lambda * err * err, dl, 2.0 * lambda * err)
}
