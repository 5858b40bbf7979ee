use serde::{Deserialize, Serialize};

use super::grammar::{self, Reading};
use super::{CandidateRule, Confidence, ExtractionError, ResearcherKind, Thresholds};
use crate::rulesdb::Metric;

/// What a researcher sends to the backend on each cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRequest {
    pub researcher_kind: ResearcherKind,
    pub excerpt: String,
    pub context_note: String,
    /// Headings that may be requested as snippets.
    pub headings: Vec<String>,
    /// (heading, text) pairs answered so far.
    pub snippets: Vec<(String, String)>,
    pub cycle: usize,
}

impl StepRequest {
    /// Characters charged against the budget.
    pub fn char_len(&self) -> usize {
        self.excerpt.len()
            + self.context_note.len()
            + self.snippets.iter().map(|(h, t)| h.len() + t.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReply {
    pub thought: String,
    #[serde(default)]
    pub candidates: Vec<CandidateRule>,
    #[serde(default)]
    pub request_snippet: Option<String>,
    #[serde(default)]
    pub done: bool,
}

pub trait ReasoningBackend: Send + Sync {
    fn name(&self) -> &str;
    fn step(&self, request: &StepRequest) -> Result<StepReply, ExtractionError>;
}

/// Grammar-based reader over recovered bullets and table rows.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeterministicBackend;

const CREDIT_HEADINGS: [&str; 4] = ["credit", "penalt", "remed", "compensation"];
const WINDOW_HEADINGS: [&str; 3] = ["measurement", "method", "definition"];

fn first_sentence(text: &str) -> String {
    let para = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('|') && !l.starts_with('-') && grammar::leading_level(l).is_none() && l.len() > 20)
        .unwrap_or("");
    match para.find(". ") {
        Some(i) => para[..=i].to_string(),
        None => para.to_string(),
    }
}

fn tiers(r: &Reading) -> String {
    let mut levels = r.levels_seen.clone();
    levels.sort();
    levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("/")
}

impl DeterministicBackend {
    fn candidate(metric: Metric, excerpt: &str, snippets: &[(String, String)]) -> CandidateRule {
        let own = grammar::segment_for(metric, excerpt);
        let mut r = grammar::read(&own);
        for (_, text) in snippets {
            // a shared snippet (e.g. a credits schedule) may cover several metrics
            let s = grammar::read(&grammar::segment_for(metric, text));
            r.credit = r.credit.or(s.credit);
            r.window_s = r.window_s.or(s.window_s);
        }
        let bands_ok = r.finite_thresholds() >= 2 && r.bands.partition_problems().is_empty();
        let complete = bands_ok && r.credit.is_some() && r.window_s.is_some();
        let thresholds = if r.has_bands() {
            Thresholds::Bands(r.bands.clone())
        } else {
            Thresholds::Raw(String::new())
        };
        CandidateRule {
            metric: metric.as_str().to_string(),
            thresholds,
            aggregation_window_s: r.window_s,
            sla_tier: tiers(&r),
            violation_impact: r.credit.as_ref().map(grammar::credit_text).unwrap_or_default(),
            credit_pct: r.credit,
            comment_text: first_sentence(excerpt),
            confidence: if complete { Confidence::Complete } else { Confidence::Partial },
            source_section: None,
        }
    }
}

impl ReasoningBackend for DeterministicBackend {
    fn name(&self) -> &str {
        "deterministic"
    }

    fn step(&self, req: &StepRequest) -> Result<StepReply, ExtractionError> {
        if req.excerpt.trim().is_empty() {
            return Ok(StepReply { thought: "empty excerpt".into(), candidates: Vec::new(), request_snippet: None, done: true });
        }
        let candidates: Vec<CandidateRule> = match req.researcher_kind.metric() {
            Some(m) => vec![Self::candidate(m, &req.excerpt, &req.snippets)],
            // a generic researcher keeps only metrics with stated bands
            None => grammar::metrics_in(&req.excerpt)
                .into_iter()
                .map(|m| Self::candidate(m, &req.excerpt, &req.snippets))
                .filter(|c| c.thresholds.bands().is_some())
                .collect(),
        };
        if candidates.is_empty() {
            return Ok(StepReply {
                thought: "no rule-bearing metric in excerpt".into(),
                candidates,
                request_snippet: None,
                done: true,
            });
        }
        let missing: Vec<super::MissingField> = candidates.iter().flat_map(|c| c.missing_fields()).collect();
        let wanted: &[&str] = if missing.contains(&super::MissingField::ViolationImpact) {
            &CREDIT_HEADINGS
        } else if missing.contains(&super::MissingField::AggregationWindow) {
            &WINDOW_HEADINGS
        } else {
            &[]
        };
        let request = req
            .headings
            .iter()
            .find(|h| {
                let l = h.to_lowercase();
                wanted.iter().any(|w| l.contains(w)) && !req.snippets.iter().any(|(k, _)| k == *h)
            })
            .cloned();
        let names: Vec<&str> = candidates.iter().map(|c| c.metric.as_str()).collect();
        let thought = if missing.is_empty() {
            format!("{}: bands, window and credits found", names.join(", "))
        } else {
            let fields: Vec<&str> = missing.iter().map(|m| m.as_str()).collect();
            format!("{}: missing {}", names.join(", "), fields.join(", "))
        };
        let done = request.is_none();
        Ok(StepReply { thought, candidates, request_snippet: request, done })
    }
}
