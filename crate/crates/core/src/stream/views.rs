//! Finance and operations projections of prediction events.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PredictionEvent, StreamError};
use crate::rulesdb::{Metric, RuleSet, RuleSpec, RulesStore, ViolationLevel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub customer: String,
    pub mrc_usd: f64,
    /// e.g. "2025-01"
    pub billing_period: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinanceView {
    pub event_id: String,
    pub customer: String,
    pub rule_id: String,
    pub level: ViolationLevel,
    pub credit_pct: f64,
    pub mrc_usd: f64,
    pub expected_credit_usd: f64,
    pub billing_period: String,
    pub window_end: i64,
}

/// Rule definitions addressable by (id, version).
pub trait RuleLookup {
    fn rule_version(&self, rule_id: &str, version: u32) -> Option<&RuleSpec>;
}

impl RuleLookup for RuleSet {
    fn rule_version(&self, rule_id: &str, version: u32) -> Option<&RuleSpec> {
        self.get(rule_id).filter(|r| r.version == version)
    }
}

impl RuleLookup for RulesStore {
    fn rule_version(&self, rule_id: &str, version: u32) -> Option<&RuleSpec> {
        self.get(rule_id, version)
    }
}

/// `expected = mrc * credit_pct / 100 * probs[level]`, zero for None.
pub fn to_finance(
    event: &PredictionEvent,
    contracts: &BTreeMap<String, Contract>,
    rules: &impl RuleLookup,
) -> Result<FinanceView, StreamError> {
    let contract = contracts.get(&event.customer).ok_or_else(|| StreamError::UnknownContract(event.customer.clone()))?;
    let rule = rules.rule_version(&event.rule_id, event.rules_version).ok_or_else(|| {
        StreamError::UnknownRuleVersion { rule_id: event.rule_id.clone(), version: event.rules_version }
    })?;
    let credit_pct = rule.credit_pct.for_level(event.level);
    let expected_credit_usd = match event.level {
        ViolationLevel::None => 0.0,
        level => contract.mrc_usd * credit_pct / 100.0 * event.probs[level.index()],
    };
    Ok(FinanceView {
        event_id: event.event_id.clone(),
        customer: event.customer.clone(),
        rule_id: event.rule_id.clone(),
        level: event.level,
        credit_pct,
        mrc_usd: contract.mrc_usd,
        expected_credit_usd,
        billing_period: contract.billing_period.clone(),
        window_end: event.window_end,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Elevated,
    High,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskThresholds {
    /// L1 at or above this probability is `high`, below is `elevated`.
    pub l1_high: f64,
}

impl Default for RiskThresholds {
    fn default() -> Self {
        Self { l1_high: 0.7 }
    }
}

impl RiskThresholds {
    pub fn risk(&self, level: ViolationLevel, p: f64) -> RiskLevel {
        match level {
            ViolationLevel::None => RiskLevel::Low,
            ViolationLevel::L1 if p >= self.l1_high => RiskLevel::High,
            ViolationLevel::L1 => RiskLevel::Elevated,
            ViolationLevel::L2 => RiskLevel::Critical,
        }
    }
}

/// Action templates per rule id; `{rack}` expands to the rack id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Playbook {
    pub entries: BTreeMap<String, Vec<String>>,
}

pub const GENERIC_ACTION: &str = "Review live telemetry for Rack {rack} and notify the facility on-call";

impl Playbook {
    /// Shipped defaults, chosen by each rule's metric.
    pub fn defaults_for(rules: &RuleSet) -> Self {
        let entries = rules
            .iter()
            .map(|r| {
                let actions: &[&str] = match r.metric {
                    Metric::PowerKw => &["Check Rack {rack} PDUs", "Cap GPU training jobs"],
                    Metric::TemperatureC => {
                        &["Inspect cooling units serving Rack {rack}", "Verify containment and blanking panels"]
                    }
                    Metric::HumidityRh => &["Check humidification units near Rack {rack}"],
                };
                (r.rule_id.clone(), actions.iter().map(|s| s.to_string()).collect())
            })
            .collect();
        Self { entries }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpsView {
    pub event_id: String,
    pub customer: String,
    pub rack_id: String,
    pub rule_id: String,
    pub risk_level: RiskLevel,
    pub recommended_actions: Vec<String>,
    pub lead_time_s: u64,
    /// The playbook had no entry and a generic action was used.
    pub playbook_fallback: bool,
    pub window_end: i64,
}

pub fn to_ops(event: &PredictionEvent, playbook: &Playbook, thresholds: &RiskThresholds) -> OpsView {
    let p = event.probs[event.level.index()];
    let risk_level = thresholds.risk(event.level, p);
    let (templates, fallback) = match playbook.entries.get(&event.rule_id) {
        Some(t) => (t.clone(), false),
        None => {
            tracing::warn!(rule = %event.rule_id, "missing playbook entry, using generic action");
            (vec![GENERIC_ACTION.to_string()], true)
        }
    };
    let recommended_actions = if event.level == ViolationLevel::None {
        Vec::new()
    } else {
        templates.iter().map(|t| t.replace("{rack}", event.rack_id.trim_start_matches("Rack "))).collect()
    };
    OpsView {
        event_id: event.event_id.clone(),
        customer: event.customer.clone(),
        rack_id: event.rack_id.clone(),
        rule_id: event.rule_id.clone(),
        risk_level,
        recommended_actions,
        lead_time_s: event.horizon_s,
        playbook_fallback: fallback && event.level != ViolationLevel::None,
        window_end: event.window_end,
    }
}
