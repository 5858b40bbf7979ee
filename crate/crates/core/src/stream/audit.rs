//! Hash-linked audit records binding each event to its input telemetry.

use serde::{Deserialize, Serialize};

use super::PredictionEvent;
use crate::canonical::{sha256_hex, to_canonical_string};

pub const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub event: PredictionEvent,
    pub telemetry_digest: String,
    pub prev_digest: String,
    pub chain_digest: String,
}

/// SHA-256 over the little-endian bytes of the lookback, row by row.
pub fn lookback_digest(lookback: &[Vec<f64>]) -> String {
    let bytes: Vec<u8> = lookback.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

pub fn chain_digest(prev: &str, telemetry: &str, event: &PredictionEvent) -> String {
    let canon = to_canonical_string(event).expect("events serialize");
    let mut buf = String::with_capacity(prev.len() + telemetry.len() + canon.len());
    buf.push_str(prev);
    buf.push_str(telemetry);
    buf.push_str(&canon);
    sha256_hex(buf.as_bytes())
}

/// Running head of one customer's chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditChain {
    pub head: String,
    pub len: u64,
}

impl Default for AuditChain {
    fn default() -> Self {
        Self { head: GENESIS.to_string(), len: 0 }
    }
}

impl AuditChain {
    /// Resume after the last record of an existing chain.
    pub fn resume(records: &[AuditRecord]) -> Self {
        match records.last() {
            Some(r) => Self { head: r.chain_digest.clone(), len: records.len() as u64 },
            None => Self::default(),
        }
    }

    pub fn append(&mut self, event: PredictionEvent, lookback: &[Vec<f64>]) -> AuditRecord {
        let telemetry_digest = lookback_digest(lookback);
        let chain = chain_digest(&self.head, &telemetry_digest, &event);
        let record =
            AuditRecord { event, telemetry_digest, prev_digest: std::mem::replace(&mut self.head, chain.clone()), chain_digest: chain };
        self.len += 1;
        record
    }
}

/// Bundle an event with the digest of its lookback and advance the chain.
pub fn to_compliance(event: &PredictionEvent, lookback: &[Vec<f64>], chain: &mut AuditChain) -> AuditRecord {
    chain.append(event.clone(), lookback)
}

impl AuditRecord {
    pub fn to_line(&self) -> String {
        to_canonical_string(self).expect("records serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainStatus {
    Ok { records: usize },
    Broken { index: usize, reason: String },
}

impl ChainStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainStatus::Ok { .. })
    }
}

/// Recompute every link; report the first record that does not follow.
pub fn verify_chain(records: &[AuditRecord]) -> ChainStatus {
    let mut head = GENESIS.to_string();
    for (index, r) in records.iter().enumerate() {
        if r.prev_digest != head {
            return ChainStatus::Broken { index, reason: "prev_digest does not match the preceding record".into() };
        }
        if chain_digest(&r.prev_digest, &r.telemetry_digest, &r.event) != r.chain_digest {
            return ChainStatus::Broken { index, reason: "chain_digest does not match record contents".into() };
        }
        head.clone_from(&r.chain_digest);
    }
    ChainStatus::Ok { records: records.len() }
}

/// Verify a JSON-lines chain byte for byte: every line must be the
/// canonical form of the record it parses to.
pub fn verify_lines(bytes: &[u8]) -> ChainStatus {
    let mut records = Vec::new();
    for (index, raw) in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()).enumerate() {
        let record: AuditRecord = match serde_json::from_slice(raw) {
            Ok(r) => r,
            Err(e) => return ChainStatus::Broken { index, reason: format!("unparseable record: {e}") },
        };
        if record.to_line().as_bytes() != raw {
            return ChainStatus::Broken { index, reason: "record is not in canonical form".into() };
        }
        records.push(record);
    }
    verify_chain(&records)
}
