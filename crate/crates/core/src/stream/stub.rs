use crate::model::{ModelError, Predictor, RuleOutput};
use crate::rulesdb::{band_of, RuleSet, RuleSpec};
use crate::telemetry::CHANNEL_ORDER;

/// Deterministic stand-in for a trained model: applies each rule to its
/// aggregate over the most recent aggregation window of the lookback and
/// reports that band with probability 1.
#[derive(Debug, Clone)]
pub struct RulePersistencePredictor {
    rules: Vec<RuleSpec>,
    ids: Vec<String>,
    lookback: usize,
    cadence_s: u64,
}

impl RulePersistencePredictor {
    /// Heads follow `order`; every id must be present in `rules`.
    pub fn new(rules: &RuleSet, order: &[String], lookback: usize, cadence_s: u64) -> Option<Self> {
        let rules: Option<Vec<RuleSpec>> = order.iter().map(|id| rules.get(id).cloned()).collect();
        Some(Self { rules: rules?, ids: order.to_vec(), lookback, cadence_s })
    }
}

impl Predictor for RulePersistencePredictor {
    fn rule_ids(&self) -> &[String] {
        &self.ids
    }

    fn lookback(&self) -> usize {
        self.lookback
    }

    fn version(&self) -> String {
        "stub-persistence".into()
    }

    fn predict(&self, lookback: &[Vec<f64>]) -> Result<Vec<RuleOutput>, ModelError> {
        if lookback.len() != self.lookback || lookback.iter().any(|r| r.len() != CHANNEL_ORDER.len()) {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} rows of {} channels",
                self.lookback,
                CHANNEL_ORDER.len()
            )));
        }
        Ok(self
            .rules
            .iter()
            .map(|rule| {
                let ch = CHANNEL_ORDER.iter().position(|c| *c == rule.metric).expect("ordered channel");
                let steps = ((rule.aggregation_window_s / self.cadence_s.max(1)) as usize).clamp(1, lookback.len());
                let tail = &lookback[lookback.len() - steps..];
                let mean = tail.iter().map(|r| r[ch]).sum::<f64>() / steps as f64;
                let level = band_of(rule, mean);
                let mut probs = [0.0; 3];
                probs[level.index()] = 1.0;
                let logits = probs.map(|p| if p == 1.0 { 0.0 } else { -1e3 });
                RuleOutput { logits, probs, forecast: mean }
            })
            .collect())
    }
}
