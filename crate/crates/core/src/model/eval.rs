//! Per-rule confusion matrices, macro-F1 and forecast error statistics.

use serde::{Deserialize, Serialize};

use super::{ModelError, Predictor};
use crate::labeler::LabeledExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    pub rule_id: String,
    /// `confusion[truth][predicted]` over {None, L1, L2}.
    pub confusion: [[usize; 3]; 3],
    pub support: [usize; 3],
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Mean of `forecast - actual`, metric units.
    pub forecast_error_mean: f64,
    /// Population standard deviation of `forecast - actual`.
    pub forecast_error_std: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvaluationReport {
    pub model_version: String,
    pub rules: Vec<RuleReport>,
    #[serde(default)]
    pub train_loss_history: Vec<f64>,
    #[serde(default)]
    pub validation_loss_history: Vec<f64>,
}

impl EvaluationReport {
    pub fn rule(&self, rule_id: &str) -> Option<&RuleReport> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }

    pub fn min_macro_f1(&self) -> f64 {
        self.rules.iter().map(|r| r.macro_f1).fold(f64::INFINITY, f64::min)
    }
}

/// Macro-F1 over classes present in truth or prediction; classes absent
/// from both are left out. An empty matrix scores 0.
pub fn macro_f1(confusion: &[[usize; 3]; 3]) -> f64 {
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..3 {
        let tp = confusion[c][c] as f64;
        let truth: usize = confusion[c].iter().sum();
        let pred: usize = (0..3).map(|r| confusion[r][c]).sum();
        if truth == 0 && pred == 0 {
            continue;
        }
        classes += 1;
        let denom = (truth + pred) as f64;
        sum += 2.0 * tp / denom;
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

/// Evaluate any predictor on labeled examples. Examples lacking a label
/// or forecast target for a rule are skipped for that rule.
pub fn evaluate<'a, P, I>(predictor: &P, examples: I) -> Result<EvaluationReport, ModelError>
where
    P: Predictor + ?Sized,
    I: IntoIterator<Item = &'a LabeledExample>,
{
    let ids = predictor.rule_ids().to_vec();
    let mut confusion = vec![[[0usize; 3]; 3]; ids.len()];
    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); ids.len()];
    for ex in examples {
        let outputs = predictor.predict(&ex.window.lookback)?;
        for (r, id) in ids.iter().enumerate() {
            let (Some(label), Some(actual)) = (ex.labels.get(id), ex.forecast_target(id)) else {
                continue;
            };
            let out = &outputs[r];
            confusion[r][label.index()][out.level().index()] += 1;
            errors[r].push(out.forecast - actual);
        }
    }
    let rules = ids
        .into_iter()
        .enumerate()
        .map(|(r, rule_id)| {
            let cm = confusion[r];
            let support = [cm[0].iter().sum(), cm[1].iter().sum(), cm[2].iter().sum()];
            let n: usize = support.iter().sum();
            let correct = cm[0][0] + cm[1][1] + cm[2][2];
            let (mean, std) = mean_std(&errors[r]);
            RuleReport {
                rule_id,
                confusion: cm,
                support,
                macro_f1: macro_f1(&cm),
                accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
                forecast_error_mean: mean,
                forecast_error_std: std,
                examples: n,
            }
        })
        .collect();
    Ok(EvaluationReport { model_version: predictor.version(), rules, ..Default::default() })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_excludes_absent_classes() {
        let only_none = [[10, 0, 0], [0, 0, 0], [0, 0, 0]];
        assert_eq!(macro_f1(&only_none), 1.0);
        let mixed = [[8, 2, 0], [1, 4, 0], [0, 0, 0]];
        // class 0: 2*8/(10+9); class 1: 2*4/(5+6)
        let want = (16.0 / 19.0 + 8.0 / 11.0) / 2.0;
        assert!((macro_f1(&mixed) - want).abs() < 1e-15);
        // predicted but never true still counts
        let spurious = [[9, 0, 1], [0, 0, 0], [0, 0, 0]];
        assert!((macro_f1(&spurious) - (18.0 / 19.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
