//! Mini-batch Adam training loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{BackwardFault, Dropout, RuleGrad};
use super::{checkpoint, eval, rule_loss, Model, ModelError, Normalizer};
use crate::labeler::{LabeledDataset, LabeledExample, Split};
use crate::rulesdb::ViolationLevel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "weights")]
pub enum ClassWeights {
    #[default]
    None,
    /// Inverse class frequency per rule, `n / (3 * count)`.
    Balanced,
    /// Explicit `[none, l1, l2]` weights per rule head.
    Fixed(Vec<[f64; 3]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Forecast loss weight.
    pub lambda: f64,
    pub class_weights: ClassWeights,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Fit input/target standardization on the training split.
    pub standardize: bool,
    /// Write `epoch_XXX.ckpt` here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub loss_record: LossRecord,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to `learning_rate * floor` at the last step.
    Cosine { floor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { floor } => {
                let t = if total <= 1 { 1.0 } else { step as f64 / (total - 1) as f64 };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
                base * (floor + (1.0 - floor) * c)
            }
        }
    }
}

/// What goes into `train_loss_history`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRecord {
    /// Mean of the mini-batch losses seen during the epoch.
    Running,
    /// Full pass over the training split after the epoch, no dropout.
    #[default]
    EndOfEpoch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda: 0.1,
            class_weights: ClassWeights::None,
            clip_norm: Some(5.0),
            seed: 11,
            standardize: true,
            checkpoint_dir: None,
            schedule: LrSchedule::Constant,
            loss_record: LossRecord::EndOfEpoch,
        }
    }
}

/// One example flattened for the network.
pub(crate) struct Sample {
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub targets: Vec<f64>,
}

pub(crate) fn samples<'a>(
    model: &Model,
    examples: impl Iterator<Item = &'a LabeledExample>,
) -> Result<Vec<Sample>, ModelError> {
    let mut out = Vec::new();
    for ex in examples {
        let mut labels = Vec::with_capacity(model.config.rule_heads.len());
        let mut targets = Vec::with_capacity(model.config.rule_heads.len());
        for id in &model.config.rule_heads {
            let label = ex.labels.get(id).ok_or_else(|| ModelError::MissingRule(id.clone()))?;
            let target = ex.forecast_target(id).ok_or_else(|| ModelError::MissingRule(id.clone()))?;
            labels.push(label.index());
            targets.push(target);
        }
        out.push(Sample { x: model.flatten(&ex.window.lookback)?, labels, targets });
    }
    Ok(out)
}

fn class_weights(cfg: &ClassWeights, train: &[Sample], rules: usize) -> Result<Option<Vec<[f64; 3]>>, ModelError> {
    match cfg {
        ClassWeights::None => Ok(None),
        ClassWeights::Fixed(w) => {
            if w.len() != rules {
                return Err(ModelError::ShapeMismatch(format!("{} class-weight rows for {rules} rules", w.len())));
            }
            Ok(Some(w.clone()))
        }
        ClassWeights::Balanced => {
            let n = train.len() as f64;
            Ok(Some(
                (0..rules)
                    .map(|r| {
                        let mut counts = [0usize; 3];
                        for s in train {
                            counts[s.labels[r]] += 1;
                        }
                        counts.map(|c| if c == 0 { 1.0 } else { n / (3.0 * c as f64) })
                    })
                    .collect(),
            ))
        }
    }
}

/// Loss and accumulated (unscaled) gradients for one sample.
pub(crate) fn sample_loss_grad(
    model: &Model,
    s: &Sample,
    lambda: f64,
    weights: Option<&[[f64; 3]]>,
    rule_mask: Option<&[bool]>,
    dropout: Option<Dropout<'_>>,
    grads: Option<(&mut [f64], f64, BackwardFault)>,
) -> f64 {
    let (outputs, fstd, cache) = model.forward_example(&s.x, dropout);
    let mut loss = 0.0;
    let mut rg = vec![RuleGrad::default(); outputs.len()];
    for r in 0..outputs.len() {
        if rule_mask.is_some_and(|m| !m[r]) {
            continue;
        }
        let err = fstd[r] - model.normalizer.normalize_target(r, s.targets[r]);
        let w = weights.map_or(1.0, |w| w[r][s.labels[r]]);
        let (l, dl, df) = rule_loss(&outputs[r].logits, s.labels[r], w, err, lambda);
        loss += l;
        rg[r] = RuleGrad { dlogits: dl, dforecast: df };
    }
    if let Some((g, scale, fault)) = grads {
        for r in &mut rg {
            r.dlogits.iter_mut().for_each(|v| *v *= scale);
            r.dforecast *= scale;
        }
        model.backward_example(&cache, &rg, g, fault);
    }
    loss
}

fn mean_loss(model: &Model, samples: &[Sample], lambda: f64, weights: Option<&[[f64; 3]]>) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.iter().map(|s| sample_loss_grad(model, s, lambda, weights, None, None, None)).sum::<f64>()
        / samples.len() as f64
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Train on the dataset's training split; the returned report evaluates
/// the validation split (or the training split when it is empty).
pub fn train(mut model: Model, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<(Model, eval::EvaluationReport), ModelError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ModelError::InvalidConfig("epochs and batch_size must be at least 1".into()));
    }
    for id in &model.config.rule_heads {
        if !dataset.rule_ids.contains(id) {
            return Err(ModelError::MissingRule(id.clone()));
        }
    }
    let train_ex: Vec<&LabeledExample> = dataset.split(Split::Train).collect();
    if train_ex.is_empty() {
        return Err(ModelError::DatasetEmpty);
    }
    let val_ex: Vec<&LabeledExample> = dataset.split(Split::Validation).collect();
    let rules = model.config.rule_heads.len();

    if cfg.standardize {
        let targets: Vec<Vec<f64>> = model
            .config
            .rule_heads
            .iter()
            .map(|id| train_ex.iter().filter_map(|e| e.forecast_target(id)).collect())
            .collect();
        model.normalizer =
            Normalizer::fit(train_ex.iter().map(|e| &e.window.lookback), &targets, model.config.channels);
    }
    let train_s = samples(&model, train_ex.iter().copied())?;
    let val_s = samples(&model, val_ex.iter().copied())?;
    let weights = class_weights(&cfg.class_weights, &train_s, rules)?;
    let weights = weights.as_deref();

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::Checkpoint(e.into()))?;
    }

    let n = model.params.len();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut grads = vec![0.0; n];
    let mut step = 0i32;
    let mut train_hist = Vec::with_capacity(cfg.epochs);
    let mut val_hist = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_s.len()).collect();
    let total_steps = cfg.epochs * train_s.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
        let mut drop_rng = epoch_rng(cfg.seed, epoch, 1);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let dropout = (model.config.dropout > 0.0)
                    .then(|| Dropout { rate: model.config.dropout, rng: &mut drop_rng });
                batch_loss += sample_loss_grad(
                    &model,
                    &train_s[i],
                    cfg.lambda,
                    weights,
                    None,
                    dropout,
                    Some((&mut grads, scale, BackwardFault::None)),
                );
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                    detail: format!("batch loss {batch_loss}, {} examples", batch.len()),
                });
            }
            total += batch_loss;
            if let Some(clip) = cfg.clip_norm {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let k = clip / norm;
                    grads.iter_mut().for_each(|g| *g *= k);
                }
            }
            let lr = cfg.schedule.rate(cfg.learning_rate, step as usize, total_steps);
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for j in 0..n {
                let g = grads[j];
                m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * g;
                m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * g * g;
                let mhat = m1[j] / bc1;
                let vhat = m2[j] / bc2;
                model.params[j] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
        let epoch_loss = match cfg.loss_record {
            LossRecord::Running => total / train_s.len() as f64,
            LossRecord::EndOfEpoch => mean_loss(&model, &train_s, cfg.lambda, weights),
        };
        let val_loss = mean_loss(&model, &val_s, cfg.lambda, weights);
        tracing::info!(epoch = epoch + 1, train_loss = epoch_loss, val_loss, "epoch done");
        train_hist.push(epoch_loss);
        val_hist.push(val_loss);
        if let Some(dir) = &cfg.checkpoint_dir {
            checkpoint::save_checkpoint(&model, &dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        }
    }

    let eval_set = if val_ex.is_empty() { &train_ex } else { &val_ex };
    let mut report = eval::evaluate(&model, eval_set.iter().copied())?;
    report.train_loss_history = train_hist;
    report.validation_loss_history = val_hist;
    Ok((model, report))
}

/// Labels and targets for each rule head of `ex`, in head order.
pub fn example_targets(model: &Model, ex: &LabeledExample) -> Result<(Vec<ViolationLevel>, Vec<f64>), ModelError> {
    let s = samples(model, std::iter::once(ex))?;
    let s = &s[0];
    Ok((
        s.labels.iter().map(|&i| ViolationLevel::from_index(i).expect("label index")).collect(),
        s.targets.clone(),
    ))
}
