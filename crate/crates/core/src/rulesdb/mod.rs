//! Structured SLA rules: threshold bands, validation, band lookup and the
//! versioned journal store.

mod bands;
mod store;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use bands::{BandProblem, Interval, IntervalParseError, ThresholdBands};
pub use store::{RuleUpdate, RulesStore, StoreError};

use crate::canonical;

/// Metric a rule is evaluated on. The serialized names double as telemetry
/// channel names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PowerKw,
    TemperatureC,
    HumidityRh,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::PowerKw, Metric::TemperatureC, Metric::HumidityRh];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::PowerKw => "power_kw",
            Metric::TemperatureC => "temperature_c",
            Metric::HumidityRh => "humidity_rh",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::PowerKw => "kW",
            Metric::TemperatureC => "°C",
            Metric::HumidityRh => "%RH",
        }
    }

    /// Short code used in generated rule identifiers (`CUST_A_PWR_01`).
    pub fn rule_code(self) -> &'static str {
        match self {
            Metric::PowerKw => "PWR",
            Metric::TemperatureC => "TEMP",
            Metric::HumidityRh => "HUM",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "power_kw" => Some(Metric::PowerKw),
            "temperature_c" => Some(Metric::TemperatureC),
            "humidity_rh" => Some(Metric::HumidityRh),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Violation severity. Ordered `None < L1 < L2`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ViolationLevel {
    #[default]
    None,
    L1,
    L2,
}

impl ViolationLevel {
    pub const ALL: [ViolationLevel; 3] = [ViolationLevel::None, ViolationLevel::L1, ViolationLevel::L2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for ViolationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationLevel::None => "none",
            ViolationLevel::L1 => "l1",
            ViolationLevel::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    #[default]
    Mean,
}

/// Credit percentages of the monthly recurring charge, per level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditPct {
    pub none: f64,
    pub l1: f64,
    pub l2: f64,
}

impl CreditPct {
    pub fn for_level(&self, level: ViolationLevel) -> f64 {
        match level {
            ViolationLevel::None => self.none,
            ViolationLevel::L1 => self.l1,
            ViolationLevel::L2 => self.l2,
        }
    }
}

/// One SLA rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub rule_id: String,
    pub customer: String,
    pub metric: Metric,
    pub aggregation_window_s: u64,
    #[serde(default)]
    pub aggregation_kind: AggregationKind,
    pub bands: ThresholdBands,
    pub credit_pct: CreditPct,
    #[serde(default)]
    pub version: u32,
    #[serde(default)]
    pub updated_at: String,
    #[serde(default)]
    pub comment_text: String,
}

/// A validation failure for a rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleViolation {
    EmptyRuleId,
    EmptyCustomer,
    NonPositiveWindow,
    Bands { problem: BandProblem },
    NoneCreditNotZero { value: f64 },
    NegativeCredit,
    CreditNotMonotone { l1: f64, l2: f64 },
}

impl fmt::Display for RuleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleViolation::EmptyRuleId => f.write_str("rule_id is empty"),
            RuleViolation::EmptyCustomer => f.write_str("customer is empty"),
            RuleViolation::NonPositiveWindow => f.write_str("aggregation window must be positive"),
            RuleViolation::Bands { problem } => problem.fmt(f),
            RuleViolation::NoneCreditNotZero { value } => {
                write!(f, "credit for level none must be 0, got {value}")
            }
            RuleViolation::NegativeCredit => f.write_str("credit percentages must be non-negative"),
            RuleViolation::CreditNotMonotone { l1, l2 } => {
                write!(f, "credit l1 ({l1}) exceeds credit l2 ({l2})")
            }
        }
    }
}

/// Checks band partition, credit monotonicity and the aggregation window.
pub fn validate_rule(rule: &RuleSpec) -> Result<(), Vec<RuleViolation>> {
    let mut violations = Vec::new();
    if rule.rule_id.trim().is_empty() {
        violations.push(RuleViolation::EmptyRuleId);
    }
    if rule.customer.trim().is_empty() {
        violations.push(RuleViolation::EmptyCustomer);
    }
    if rule.aggregation_window_s == 0 {
        violations.push(RuleViolation::NonPositiveWindow);
    }
    violations.extend(
        rule.bands
            .partition_problems()
            .into_iter()
            .map(|problem| RuleViolation::Bands { problem }),
    );
    let c = rule.credit_pct;
    if c.none != 0.0 {
        violations.push(RuleViolation::NoneCreditNotZero { value: c.none });
    }
    if c.l1 < 0.0 || c.l2 < 0.0 || !c.l1.is_finite() || !c.l2.is_finite() {
        violations.push(RuleViolation::NegativeCredit);
    } else if c.l1 > c.l2 {
        violations.push(RuleViolation::CreditNotMonotone { l1: c.l1, l2: c.l2 });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Level of the band containing `value`.
///
/// Valid rules cover every finite real. Values outside every band (NaN, or
/// a rule that failed validation) are treated as the most severe level.
pub fn band_of(rule: &RuleSpec, value: f64) -> ViolationLevel {
    rule.bands.level_of(value).unwrap_or(ViolationLevel::L2)
}

/// Latest-version rules for one customer, ordered by rule id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<RuleSpec>,
}

impl RuleSet {
    pub fn new(mut rules: Vec<RuleSpec>) -> Self {
        rules.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
        Self { rules }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, rule_id: &str) -> Option<&RuleSpec> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.rule_id.clone()).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RuleSpec> {
        self.rules.iter()
    }

    pub fn for_customer(&self, customer: &str) -> RuleSet {
        RuleSet::new(self.rules.iter().filter(|r| r.customer == customer).cloned().collect())
    }

    pub fn without(&self, rule_id: &str) -> RuleSet {
        RuleSet::new(self.rules.iter().filter(|r| r.rule_id != rule_id).cloned().collect())
    }

    pub fn versions(&self) -> BTreeMap<String, u32> {
        self.rules.iter().map(|r| (r.rule_id.clone(), r.version)).collect()
    }

    /// Digest over the canonical JSON of every rule, in rule-id order.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for rule in &self.rules {
            bytes.extend(canonical::to_canonical_string(rule).expect("rule serializes").bytes());
            bytes.push(b'\n');
        }
        canonical::sha256_hex(&bytes)
    }

    /// Parse a JSON-lines rules file, keeping only the highest version of
    /// each rule id.
    pub fn from_jsonl(text: &str) -> Result<RuleSet, serde_json::Error> {
        let mut latest: BTreeMap<String, RuleSpec> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rule: RuleSpec = serde_json::from_str(line)?;
            match latest.get(&rule.rule_id) {
                Some(existing) if existing.version >= rule.version => {}
                _ => {
                    latest.insert(rule.rule_id.clone(), rule);
                }
            }
        }
        Ok(RuleSet::new(latest.into_values().collect()))
    }
}

impl<'a> IntoIterator for &'a RuleSet {
    type Item = &'a RuleSpec;
    type IntoIter = std::slice::Iter<'a, RuleSpec>;

    fn into_iter(self) -> Self::IntoIter {
        self.rules.iter()
    }
}

/// The three rules of the example contract for `Customer_A`.
pub fn example_rules() -> RuleSet {
    let customer = "Customer_A".to_string();
    let stamp = "2025-01-01T00:00:00Z".to_string();
    RuleSet::new(vec![
        RuleSpec {
            rule_id: "CUST_A_PWR_01".into(),
            customer: customer.clone(),
            metric: Metric::PowerKw,
            aggregation_window_s: 300,
            aggregation_kind: AggregationKind::Mean,
            bands: ThresholdBands {
                none: vec![Interval::below(30.0, true)],
                l1: vec![Interval::bounded(30.0, false, 35.0, true)],
                l2: vec![Interval::above(35.0, false)],
            },
            credit_pct: CreditPct { none: 0.0, l1: 5.0, l2: 15.0 },
            version: 1,
            updated_at: stamp.clone(),
            comment_text: "Contracted power drawn at the rack level".into(),
        },
        RuleSpec {
            rule_id: "CUST_A_TEMP_01".into(),
            customer: customer.clone(),
            metric: Metric::TemperatureC,
            aggregation_window_s: 900,
            aggregation_kind: AggregationKind::Mean,
            bands: ThresholdBands {
                none: vec![Interval::bounded(18.0, true, 27.0, true)],
                l1: vec![
                    Interval::bounded(16.0, true, 18.0, false),
                    Interval::bounded(27.0, false, 29.0, true),
                ],
                l2: vec![Interval::below(16.0, false), Interval::above(29.0, false)],
            },
            credit_pct: CreditPct { none: 0.0, l1: 3.0, l2: 10.0 },
            version: 1,
            updated_at: stamp.clone(),
            comment_text: "Temperature stability".into(),
        },
        RuleSpec {
            rule_id: "CUST_A_HUM_01".into(),
            customer,
            metric: Metric::HumidityRh,
            aggregation_window_s: 900,
            aggregation_kind: AggregationKind::Mean,
            bands: ThresholdBands {
                none: vec![Interval::bounded(40.0, true, 60.0, true)],
                l1: vec![
                    Interval::bounded(35.0, true, 40.0, false),
                    Interval::bounded(60.0, false, 65.0, true),
                ],
                l2: vec![Interval::below(35.0, false), Interval::above(65.0, false)],
            },
            credit_pct: CreditPct { none: 0.0, l1: 2.0, l2: 8.0 },
            version: 1,
            updated_at: stamp,
            comment_text: "Humidity stability".into(),
        },
    ])
}
