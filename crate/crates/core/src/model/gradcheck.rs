//! Finite-difference verification of the analytic backward pass.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::BackwardFault;
use super::train::{sample_loss_grad, Sample};
use super::{Layout, Model, ModelError};
use crate::rulesdb::ViolationLevel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub samples_per_group: usize,
    pub step: f64,
    pub lambda: f64,
    pub seed: u64,
    pub fault: BackwardFault,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { samples_per_group: 20, step: 1e-5, lambda: 0.1, seed: 5, fault: BackwardFault::None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_group: BTreeMap<String, f64>,
    pub checked: usize,
}

fn sample_of(model: &Model, lookback: &[Vec<f64>], labels: &[ViolationLevel], targets: &[f64]) -> Result<Sample, ModelError> {
    let rules = model.config.rule_heads.len();
    if labels.len() != rules || targets.len() != rules {
        return Err(ModelError::ShapeMismatch(format!("expected {rules} labels and targets")));
    }
    Ok(Sample {
        x: model.flatten(lookback)?,
        labels: labels.iter().map(|l| l.index()).collect(),
        targets: targets.to_vec(),
    })
}

/// Parameter indices to probe in one group: one per tensor first, then
/// uniformly at random without replacement.
fn pick(layout: &Layout, group: &str, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let tensors: Vec<_> = layout.group_tensors(group).collect();
    let mut picked: Vec<usize> = tensors.iter().map(|t| t.offset + rng.gen_range(0..t.len())).collect();
    let mut pool: Vec<usize> = tensors.iter().flat_map(|t| t.range()).filter(|i| !picked.contains(i)).collect();
    pool.shuffle(rng);
    let extra = count.saturating_sub(picked.len()).min(pool.len());
    picked.extend_from_slice(&pool[..extra]);
    picked
}

/// Compare analytic and central-difference gradients of the example loss.
pub fn grad_check(
    model: &Model,
    lookback: &[Vec<f64>],
    labels: &[ViolationLevel],
    targets: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, ModelError> {
    let s = sample_of(model, lookback, labels, targets)?;
    let mut analytic = vec![0.0; model.params.len()];
    sample_loss_grad(model, &s, opts.lambda, None, None, None, Some((&mut analytic, 1.0, opts.fault)));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut per_group = BTreeMap::new();
    let mut checked = 0;
    for group in model.layout.groups() {
        let mut worst = 0.0f64;
        for i in pick(&model.layout, &group, opts.samples_per_group, &mut rng) {
            let orig = probe.params[i];
            probe.params[i] = orig + opts.step;
            let up = sample_loss_grad(&probe, &s, opts.lambda, None, None, None, None);
            probe.params[i] = orig - opts.step;
            let down = sample_loss_grad(&probe, &s, opts.lambda, None, None, None, None);
            probe.params[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
        per_group.insert(group, worst);
    }
    let max_rel_error = per_group.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_group, checked })
}

/// Largest absolute gradient on other rules' parameters when only
/// `rule_id`'s loss is back-propagated.
pub fn cross_rule_gradient_max(
    model: &Model,
    lookback: &[Vec<f64>],
    labels: &[ViolationLevel],
    targets: &[f64],
    rule_id: &str,
) -> Result<f64, ModelError> {
    let s = sample_of(model, lookback, labels, targets)?;
    let r = model.rule_index(rule_id).ok_or_else(|| ModelError::MissingRule(rule_id.to_string()))?;
    let mask: Vec<bool> = (0..model.config.rule_heads.len()).map(|i| i == r).collect();
    let mut g = vec![0.0; model.params.len()];
    sample_loss_grad(model, &s, 1.0, None, Some(&mask), None, Some((&mut g, 1.0, BackwardFault::None)));
    let mut worst = 0.0f64;
    for other in model.config.rule_heads.iter().filter(|id| *id != rule_id) {
        for group in Layout::rule_groups(other) {
            for t in model.layout.group_tensors(&group) {
                worst = g[t.range()].iter().fold(worst, |m, v| m.max(v.abs()));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn example() -> (Vec<Vec<f64>>, Vec<ViolationLevel>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lb: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        (lb, vec![ViolationLevel::L1, ViolationLevel::None, ViolationLevel::L2], vec![0.7, -1.2, 0.3])
    }

    #[test]
    fn analytic_gradient_matches() {
        let m = build_model(ModelConfig::default()).unwrap();
        let (lb, y, t) = example();
        let rep = grad_check(&m, &lb, &y, &t, &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep.per_group);
        assert!(rep.checked >= 20 * rep.per_group.len());
    }

    #[test]
    fn corrupted_attention_backward_is_caught() {
        let m = build_model(ModelConfig::default()).unwrap();
        let (lb, y, t) = example();
        let opts = GradCheckOptions { fault: BackwardFault::AttentionSoftmax, ..Default::default() };
        let rep = grad_check(&m, &lb, &y, &t, &opts).unwrap();
        assert!(rep.per_group["encoder0.attention"] > 1e-2, "{:?}", rep.per_group);
    }

    #[test]
    fn rule_heads_do_not_leak() {
        let m = build_model(ModelConfig::default()).unwrap();
        let (lb, y, t) = example();
        assert_eq!(cross_rule_gradient_max(&m, &lb, &y, &t, "CUST_A_TEMP_01").unwrap(), 0.0);
    }
}
