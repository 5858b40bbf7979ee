//! Rolling-window inference over live telemetry, with stakeholder views
//! and a hash-chained audit trail.

pub mod audit;
mod stub;
pub mod views;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Predictor};
use crate::rulesdb::{RuleSet, ViolationLevel};
use crate::telemetry::{Channel, TelemetryPoint, CHANNEL_ORDER};

pub use audit::{to_compliance, verify_chain, verify_lines, AuditChain, AuditRecord, ChainStatus, GENESIS};
pub use stub::RulePersistencePredictor;
pub use views::{to_finance, to_ops, Contract, FinanceView, OpsView, Playbook, RiskLevel, RiskThresholds, RuleLookup, GENERIC_ACTION};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("predictor head {0} has no active rule")]
    UnknownRule(String),
    #[error("predictor expects lookback {expected}, engine configured for {configured}")]
    LookbackMismatch { expected: usize, configured: usize },
    #[error("no contract for customer {0}")]
    UnknownContract(String),
    #[error("rule {rule_id} version {version} not found")]
    UnknownRuleVersion { rule_id: String, version: u32 },
    #[error("invalid stream config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub last: f64,
}

impl SensorStats {
    fn of(values: impl Iterator<Item = f64>) -> SensorStats {
        let (mut min, mut max, mut sum, mut last, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, f64::NAN, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            last = v;
            n += 1;
        }
        SensorStats { min, max, mean: sum / n as f64, last }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEvent {
    pub event_id: String,
    pub customer: String,
    pub rack_id: String,
    pub rule_id: String,
    pub window_start: i64,
    pub window_end: i64,
    /// How far past `window_end` the prediction reaches.
    pub horizon_s: u64,
    pub level: ViolationLevel,
    pub probs: [f64; 3],
    pub forecast: f64,
    pub sensor_stats: SensorStats,
    pub model_version: String,
    pub rules_version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub cadence_s: u64,
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { cadence_s: 30, lookback: 60, horizon: 90, stride: 10 }
    }
}

/// Counters kept across `step` calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamStats {
    pub accepted: u64,
    pub rejected_duplicate: u64,
    pub rejected_out_of_order: u64,
    pub rejected_foreign: u64,
    pub windows_evaluated: u64,
    pub windows_skipped_gap: u64,
}

/// One rack's rolling state.
#[derive(Debug, Default)]
struct RackBuffer {
    /// Bin index currently accumulating.
    open_bin: Option<i64>,
    /// (channel, sensor) -> (sum, count) for the open bin.
    acc: BTreeMap<(usize, String), (f64, usize)>,
    /// Last accepted timestamp per (channel, sensor).
    last_seen: BTreeMap<(usize, String), i64>,
    /// Finalized rows: (bin, values or gap).
    rows: VecDeque<(i64, Option<Vec<f64>>)>,
    rows_seen: u64,
    since_eval: Option<usize>,
}

/// Everything produced by one `step`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub events: Vec<PredictionEvent>,
    pub audit: Vec<AuditRecord>,
}

/// One customer's inference engine.
pub struct StreamEngine {
    customer: String,
    predictor: Arc<dyn Predictor>,
    rules: RuleSet,
    config: StreamConfig,
    racks: BTreeMap<String, RackBuffer>,
    chain: AuditChain,
    stats: StreamStats,
}

impl StreamEngine {
    pub fn new(
        customer: &str,
        predictor: Arc<dyn Predictor>,
        rules: &RuleSet,
        config: StreamConfig,
    ) -> Result<Self, StreamError> {
        if config.cadence_s == 0 || config.lookback == 0 || config.stride == 0 {
            return Err(StreamError::InvalidConfig("cadence, lookback and stride must be positive"));
        }
        if predictor.lookback() != config.lookback {
            return Err(StreamError::LookbackMismatch { expected: predictor.lookback(), configured: config.lookback });
        }
        let mut engine = Self {
            customer: customer.to_string(),
            predictor,
            rules: RuleSet::default(),
            config,
            racks: BTreeMap::new(),
            chain: AuditChain::default(),
            stats: StreamStats::default(),
        };
        engine.set_rules(rules)?;
        Ok(engine)
    }

    /// Continue an existing audit chain instead of starting at genesis.
    pub fn with_chain(mut self, chain: AuditChain) -> Self {
        self.chain = chain;
        self
    }

    /// Swap in a new rule version; future events carry it.
    pub fn set_rules(&mut self, rules: &RuleSet) -> Result<(), StreamError> {
        let mine = rules.for_customer(&self.customer);
        for id in self.predictor.rule_ids() {
            if mine.get(id).is_none() {
                return Err(StreamError::UnknownRule(id.clone()));
            }
        }
        self.rules = mine;
        Ok(())
    }

    pub fn stats(&self) -> StreamStats {
        self.stats
    }

    pub fn chain(&self) -> &AuditChain {
        &self.chain
    }

    pub fn customer(&self) -> &str {
        &self.customer
    }

    /// Feed points (any order across racks, monotone per sensor).
    pub fn step(&mut self, batch: &[TelemetryPoint]) -> Result<StepOutput, StreamError> {
        let mut out = StepOutput::default();
        let cadence = self.config.cadence_s as i64;
        for p in batch {
            if p.customer != self.customer || !p.value.is_finite() {
                self.stats.rejected_foreign += 1;
                continue;
            }
            let ch = channel_index(p.channel);
            let key = (ch, p.sensor_id.clone());
            let bin = p.timestamp.div_euclid(cadence);
            let rack = self.racks.entry(p.rack_id.clone()).or_default();
            match rack.last_seen.get(&key) {
                Some(&t) if p.timestamp == t => {
                    self.stats.rejected_duplicate += 1;
                    continue;
                }
                Some(&t) if p.timestamp < t => {
                    self.stats.rejected_out_of_order += 1;
                    continue;
                }
                _ => {}
            }
            if rack.open_bin.is_some_and(|open| bin < open) {
                self.stats.rejected_out_of_order += 1;
                continue;
            }
            if let Some(open) = rack.open_bin.filter(|&open| bin > open) {
                let rack_id = p.rack_id.clone();
                self.close_bins(&rack_id, open, bin, &mut out)?;
            }
            let rack = self.racks.get_mut(&p.rack_id).expect("rack exists");
            rack.open_bin = Some(bin);
            rack.last_seen.insert(key.clone(), p.timestamp);
            let slot = rack.acc.entry(key).or_insert((0.0, 0));
            slot.0 += p.value;
            slot.1 += 1;
            self.stats.accepted += 1;
        }
        Ok(out)
    }

    /// Finalize every open bin (end of stream).
    pub fn flush(&mut self) -> Result<StepOutput, StreamError> {
        let mut out = StepOutput::default();
        let open: Vec<(String, i64)> =
            self.racks.iter().filter_map(|(id, r)| r.open_bin.map(|b| (id.clone(), b))).collect();
        for (rack_id, bin) in open {
            self.close_bins(&rack_id, bin, bin + 1, &mut out)?;
            self.racks.get_mut(&rack_id).expect("rack exists").open_bin = Some(bin + 1);
        }
        Ok(out)
    }

    /// Finalize `open` and insert gap rows up to (not including) `next`.
    fn close_bins(&mut self, rack_id: &str, open: i64, next: i64, out: &mut StepOutput) -> Result<(), StreamError> {
        let rack = self.racks.get_mut(rack_id).expect("rack exists");
        let row = finalize_row(&rack.acc);
        rack.acc.clear();
        self.push_row(rack_id, open, row, out)?;
        // at most `lookback` gap rows matter; the rest only reset the buffer
        let gaps = (next - open - 1).max(0);
        let keep = gaps.min(self.config.lookback as i64);
        for b in (next - keep)..next {
            self.push_row(rack_id, b, None, out)?;
        }
        Ok(())
    }

    fn push_row(&mut self, rack_id: &str, bin: i64, row: Option<Vec<f64>>, out: &mut StepOutput) -> Result<(), StreamError> {
        let l = self.config.lookback;
        let rack = self.racks.get_mut(rack_id).expect("rack exists");
        rack.rows.push_back((bin, row));
        while rack.rows.len() > l {
            rack.rows.pop_front();
        }
        rack.rows_seen += 1;
        if rack.rows.len() < l {
            return Ok(());
        }
        let due = match rack.since_eval {
            None => true,
            Some(n) => n + 1 >= self.config.stride,
        };
        if !due {
            rack.since_eval = rack.since_eval.map(|n| n + 1);
            return Ok(());
        }
        rack.since_eval = Some(0);
        // contiguous and gap-free
        let first = rack.rows.front().expect("non-empty").0;
        let contiguous = rack.rows.iter().enumerate().all(|(i, (b, _))| *b == first + i as i64);
        if !contiguous || rack.rows.iter().any(|(_, r)| r.is_none()) {
            self.stats.windows_skipped_gap += 1;
            tracing::warn!(customer = %self.customer, rack = rack_id, bin, "gap in buffer, window skipped");
            return Ok(());
        }
        let lookback: Vec<Vec<f64>> = rack.rows.iter().map(|(_, r)| r.clone().expect("checked")).collect();
        let cadence = self.config.cadence_s as i64;
        let window_start = first * cadence;
        let window_end = (bin + 1) * cadence;
        self.evaluate(rack_id, window_start, window_end, &lookback, out)
    }

    fn evaluate(
        &mut self,
        rack_id: &str,
        window_start: i64,
        window_end: i64,
        lookback: &[Vec<f64>],
        out: &mut StepOutput,
    ) -> Result<(), StreamError> {
        let outputs = self.predictor.predict(lookback)?;
        let model_version = self.predictor.version();
        self.stats.windows_evaluated += 1;
        for (rule_id, o) in self.predictor.rule_ids().iter().zip(outputs) {
            let rule = self.rules.get(rule_id).ok_or_else(|| StreamError::UnknownRule(rule_id.clone()))?;
            let ch = channel_index(rule.metric);
            let event = PredictionEvent {
                event_id: format!("{}:{}:{}:{}", self.customer, rack_id, rule_id, window_end),
                customer: self.customer.clone(),
                rack_id: rack_id.to_string(),
                rule_id: rule_id.clone(),
                window_start,
                window_end,
                horizon_s: self.config.horizon as u64 * self.config.cadence_s,
                level: o.level(),
                probs: o.probs,
                forecast: o.forecast,
                sensor_stats: SensorStats::of(lookback.iter().map(|r| r[ch])),
                model_version: model_version.clone(),
                rules_version: rule.version,
            };
            let record = self.chain.append(event.clone(), lookback);
            out.events.push(event);
            out.audit.push(record);
        }
        Ok(())
    }
}

fn channel_index(c: Channel) -> usize {
    CHANNEL_ORDER.iter().position(|x| *x == c).expect("every channel is ordered")
}

/// Per-sensor bin means, then summed (power) or averaged across sensors.
fn finalize_row(acc: &BTreeMap<(usize, String), (f64, usize)>) -> Option<Vec<f64>> {
    let mut row = Vec::with_capacity(CHANNEL_ORDER.len());
    for (ch, channel) in CHANNEL_ORDER.iter().enumerate() {
        let means: Vec<f64> = acc.range((ch, String::new())..(ch + 1, String::new())).map(|(_, (s, n))| s / *n as f64).collect();
        if means.is_empty() {
            return None;
        }
        let total: f64 = means.iter().sum();
        row.push(match channel {
            Channel::PowerKw => total,
            _ => total / means.len() as f64,
        });
    }
    Some(row)
}
