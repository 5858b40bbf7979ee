//! Append-only JSON-lines rules journal with an in-memory index.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};

use serde::Serialize;

use super::{validate_rule, RuleSet, RuleSpec, RuleViolation};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("rule {rule_id} failed validation: {}", summarize(.violations))]
    ValidationFailed { rule_id: String, violations: Vec<RuleViolation> },
    #[error("corrupt rules journal at line {line}: {reason}")]
    CorruptStore { line: usize, reason: String },
    #[error("rules journal i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn summarize(violations: &[RuleViolation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Published after every successful upsert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RuleUpdate {
    pub rule_id: String,
    pub customer: String,
    pub version: u32,
}

/// Versioned rules store. Every version ever written stays readable.
///
/// Writers need `&mut self`; share behind a lock for concurrent readers.
#[derive(Debug, Default)]
pub struct RulesStore {
    journal: Option<PathBuf>,
    history: Vec<RuleSpec>,
    /// rule_id -> indices into `history`, ascending version
    index: BTreeMap<String, Vec<usize>>,
    subscribers: Vec<Sender<RuleUpdate>>,
}

impl RulesStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a journal file and replay it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self { journal: Some(path.clone()), ..Self::default() };
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rule: RuleSpec = serde_json::from_str(line)
                    .map_err(|e| StoreError::CorruptStore { line: i + 1, reason: e.to_string() })?;
                let expected = store.latest_version(&rule.rule_id).unwrap_or(0) + 1;
                if rule.version != expected {
                    return Err(StoreError::CorruptStore {
                        line: i + 1,
                        reason: format!(
                            "{} has version {}, expected {expected}",
                            rule.rule_id, rule.version
                        ),
                    });
                }
                store.push(rule);
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
            File::create(&path)?;
        }
        Ok(store)
    }

    fn push(&mut self, rule: RuleSpec) {
        let idx = self.history.len();
        self.index.entry(rule.rule_id.clone()).or_default().push(idx);
        self.history.push(rule);
    }

    pub fn latest_version(&self, rule_id: &str) -> Option<u32> {
        self.index.get(rule_id).and_then(|ix| ix.last()).map(|&i| self.history[i].version)
    }

    /// Insert or update a rule, stamping the current time.
    pub fn upsert(&mut self, rule: RuleSpec) -> Result<u32, StoreError> {
        let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        self.upsert_at(rule, &now)
    }

    /// Insert or update a rule with an explicit `updated_at` stamp. The
    /// incoming `version` field is ignored; the store assigns it.
    pub fn upsert_at(&mut self, mut rule: RuleSpec, updated_at: &str) -> Result<u32, StoreError> {
        if let Err(violations) = validate_rule(&rule) {
            return Err(StoreError::ValidationFailed { rule_id: rule.rule_id, violations });
        }
        rule.version = self.latest_version(&rule.rule_id).unwrap_or(0) + 1;
        rule.updated_at = updated_at.to_string();
        if let Some(path) = &self.journal {
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer(&mut w, &rule).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        let update = RuleUpdate {
            rule_id: rule.rule_id.clone(),
            customer: rule.customer.clone(),
            version: rule.version,
        };
        let version = rule.version;
        self.push(rule);
        self.subscribers.retain(|tx| tx.send(update.clone()).is_ok());
        Ok(version)
    }

    /// Load every rule of a set, keeping their `updated_at` stamps.
    pub fn load(&mut self, rules: &RuleSet) -> Result<(), StoreError> {
        for rule in rules {
            let stamp = rule.updated_at.clone();
            self.upsert_at(rule.clone(), &stamp)?;
        }
        Ok(())
    }

    pub fn get(&self, rule_id: &str, version: u32) -> Option<&RuleSpec> {
        self.index
            .get(rule_id)?
            .iter()
            .map(|&i| &self.history[i])
            .find(|r| r.version == version)
    }

    pub fn latest(&self, rule_id: &str) -> Option<&RuleSpec> {
        self.index.get(rule_id).and_then(|ix| ix.last()).map(|&i| &self.history[i])
    }

    pub fn history(&self, rule_id: &str) -> Vec<&RuleSpec> {
        self.index
            .get(rule_id)
            .map(|ix| ix.iter().map(|&i| &self.history[i]).collect())
            .unwrap_or_default()
    }

    /// Latest version of every rule for `customer`, in rule-id order.
    pub fn get_rules(&self, customer: &str) -> RuleSet {
        RuleSet::new(
            self.index
                .values()
                .filter_map(|ix| ix.last().map(|&i| &self.history[i]))
                .filter(|r| r.customer == customer)
                .cloned()
                .collect(),
        )
    }

    pub fn customers(&self) -> Vec<String> {
        let mut c: Vec<String> = self.history.iter().map(|r| r.customer.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Receive an event per successful upsert.
    pub fn subscribe(&mut self) -> Receiver<RuleUpdate> {
        let (tx, rx) = mpsc::channel();
        self.subscribers.push(tx);
        rx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rulesdb::{example_rules, Interval};

    const T0: &str = "2025-01-01T00:00:00Z";

    #[test]
    fn versions_increment_and_history_is_kept() {
        let mut store = RulesStore::in_memory();
        let rx = store.subscribe();
        let rule = example_rules().get("CUST_A_PWR_01").unwrap().clone();
        assert_eq!(store.upsert_at(rule.clone(), T0).unwrap(), 1);
        let mut changed = rule.clone();
        changed.credit_pct.l1 = 6.0;
        assert_eq!(store.upsert_at(changed, "2025-02-01T00:00:00Z").unwrap(), 2);
        assert_eq!(store.get("CUST_A_PWR_01", 1).unwrap().credit_pct.l1, 5.0);
        assert_eq!(store.get_rules("Customer_A").rules[0].credit_pct.l1, 6.0);
        let events: Vec<_> = rx.try_iter().collect();
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].version, 2);
    }

    #[test]
    fn invalid_rule_is_rejected() {
        let mut store = RulesStore::in_memory();
        let mut rule = example_rules().get("CUST_A_PWR_01").unwrap().clone();
        rule.bands.l1 = vec![Interval::bounded(30.0, true, 35.0, true)];
        assert!(matches!(store.upsert_at(rule, T0), Err(StoreError::ValidationFailed { .. })));
        assert!(store.latest("CUST_A_PWR_01").is_none());
    }

    #[test]
    fn unknown_customer_is_empty() {
        let mut store = RulesStore::in_memory();
        store.load(&example_rules()).unwrap();
        assert_eq!(store.get_rules("Customer_A").len(), 3);
        assert!(store.get_rules("Customer_Z").is_empty());
    }

    #[test]
    fn journal_replays_and_old_versions_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.jsonl");
        let mut store = RulesStore::open(&path).unwrap();
        store.load(&example_rules()).unwrap();
        let v1_bytes = serde_json::to_vec(store.get("CUST_A_TEMP_01", 1).unwrap()).unwrap();
        let mut t = store.latest("CUST_A_TEMP_01").unwrap().clone();
        t.credit_pct.l2 = 12.0;
        store.upsert_at(t, "2025-03-01T00:00:00Z").unwrap();
        drop(store);

        let reopened = RulesStore::open(&path).unwrap();
        assert_eq!(reopened.latest_version("CUST_A_TEMP_01"), Some(2));
        assert_eq!(
            serde_json::to_vec(reopened.get("CUST_A_TEMP_01", 1).unwrap()).unwrap(),
            v1_bytes
        );
    }

    #[test]
    fn corrupt_journal_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(RulesStore::open(&path), Err(StoreError::CorruptStore { line: 1, .. })));
    }
}
