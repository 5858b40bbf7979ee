//! Rule extraction from sanitized contracts: an orchestrator routes
//! section excerpts to researchers, verifies the pooled candidates and
//! loops until the rule set is complete or a cap is hit.

mod backend;
pub mod grammar;
mod remote;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{DeterministicBackend, ReasoningBackend, StepReply, StepRequest};
pub use remote::{RemoteBackend, RemoteConfig};

use crate::docio::SanitizedDocument;
use crate::rulesdb::{validate_rule, AggregationKind, CreditPct, Metric, RuleSet, RuleSpec, ThresholdBands, ViolationLevel};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("character budget exhausted")]
    BudgetExhausted,
    #[error("reasoning backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("extraction incomplete: {} rule(s), open questions: {}", .0.rules.len(), .0.open_questions.join("; "))]
    Incomplete(Box<Extraction>),
    #[error("trace: {0}")]
    Trace(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResearcherKind {
    Power,
    Temperature,
    Humidity,
    Generic,
}

impl ResearcherKind {
    pub fn metric(self) -> Option<Metric> {
        match self {
            ResearcherKind::Power => Some(Metric::PowerKw),
            ResearcherKind::Temperature => Some(Metric::TemperatureC),
            ResearcherKind::Humidity => Some(Metric::HumidityRh),
            ResearcherKind::Generic => None,
        }
    }

    pub fn for_metric(m: Metric) -> ResearcherKind {
        match m {
            Metric::PowerKw => ResearcherKind::Power,
            Metric::TemperatureC => ResearcherKind::Temperature,
            Metric::HumidityRh => ResearcherKind::Humidity,
        }
    }

    /// Keyword routing over an excerpt.
    pub fn route(text: &str) -> ResearcherKind {
        grammar::metric_in(text).map_or(ResearcherKind::Generic, ResearcherKind::for_metric)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResearcherAssignment {
    pub researcher_kind: ResearcherKind,
    pub excerpt: String,
    pub context_note: String,
    /// Section the excerpt was taken from.
    pub section: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form", content = "value")]
pub enum Thresholds {
    Raw(String),
    Bands(ThresholdBands),
}

impl Thresholds {
    pub fn bands(&self) -> Option<&ThresholdBands> {
        match self {
            Thresholds::Bands(b) => Some(b),
            Thresholds::Raw(_) => None,
        }
    }
}

/// A researcher's belief about one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRule {
    pub metric: String,
    pub thresholds: Thresholds,
    #[serde(default)]
    pub aggregation_window_s: Option<u64>,
    pub sla_tier: String,
    pub violation_impact: String,
    #[serde(default)]
    pub credit_pct: Option<CreditPct>,
    pub comment_text: String,
    pub confidence: Confidence,
    #[serde(default)]
    pub source_section: Option<usize>,
}

impl CandidateRule {
    pub fn metric(&self) -> Option<Metric> {
        Metric::parse(&self.metric)
    }

    /// Fields verification would flag, in a fixed order.
    pub fn missing_fields(&self) -> Vec<MissingField> {
        let mut out = Vec::new();
        if self.metric().is_none() {
            out.push(MissingField::Metric);
        }
        match self.thresholds.bands() {
            Some(b) if b.endpoints().len() >= 2 && b.partition_problems().is_empty() => {}
            _ => out.push(MissingField::Thresholds),
        }
        if self.credit_pct.is_none() || self.violation_impact.trim().is_empty() {
            out.push(MissingField::ViolationImpact);
        }
        if self.aggregation_window_s.unwrap_or(0) == 0 {
            out.push(MissingField::AggregationWindow);
        }
        out
    }

    /// Schema check applied to every backend reply.
    pub fn schema_valid(&self) -> bool {
        self.confidence == Confidence::Partial || self.metric().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingField {
    Metric,
    Thresholds,
    ViolationImpact,
    AggregationWindow,
}

impl MissingField {
    pub fn as_str(self) -> &'static str {
        match self {
            MissingField::Metric => "metric",
            MissingField::Thresholds => "thresholds",
            MissingField::ViolationImpact => "violation_impact",
            MissingField::AggregationWindow => "aggregation_window",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub missing_items: Vec<(usize, MissingField)>,
    pub follow_up_assignments: Vec<ResearcherAssignment>,
    /// Candidates after merging duplicates; indices above refer here.
    pub merged: Vec<CandidateRule>,
    pub conflicts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub hypotheses: Vec<CandidateRule>,
    pub uncovered_sections: BTreeSet<usize>,
    pub open_questions: Vec<String>,
    pub iteration: usize,
    pub token_budget_remaining: i64,
}

impl AgentState {
    pub fn new(doc: &SanitizedDocument, budget: i64) -> Self {
        Self {
            hypotheses: Vec::new(),
            uncovered_sections: (0..doc.sections.len()).collect(),
            open_questions: Vec::new(),
            iteration: 0,
            token_budget_remaining: budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub max_iterations: usize,
    /// Think/act cycles per researcher.
    pub step_cap: usize,
    /// Characters sent to the backend, summed over all calls.
    pub char_budget: i64,
    /// Metrics a contract is expected to cover; a missing one becomes an open question.
    pub expected_metrics: Vec<Metric>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { max_iterations: 5, step_cap: 4, char_budget: 200_000, expected_metrics: Metric::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Orchestrate,
    Research,
    Verify,
    Done,
}

/// One think/act step, as written to the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub node: Node,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub researcher: Option<ResearcherKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cycle: Option<usize>,
    pub thought: String,
    pub action: String,
    pub chars: usize,
}

/// Result of a run, complete or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub rules: RuleSet,
    pub open_questions: Vec<String>,
    pub verdict: Option<Verdict>,
    pub iterations: usize,
    pub budget_remaining: i64,
    pub trace: Vec<TraceEntry>,
}

impl Extraction {
    pub fn write_trace(&self, out: &mut impl Write) -> std::io::Result<()> {
        for t in &self.trace {
            writeln!(out, "{}", serde_json::to_string(t).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

/// Sections worth a researcher: they name a metric, compare numbers or state percentages.
fn relevant(text: &str) -> bool {
    grammar::metric_in(text).is_some() || text.contains('%') || text.contains('<') || text.contains('>')
}

/// One assignment per uncovered, rule-bearing section.
pub fn plan_assignments(doc: &SanitizedDocument, state: &AgentState) -> Result<Vec<ResearcherAssignment>, ExtractionError> {
    if state.token_budget_remaining <= 0 {
        return Err(ExtractionError::BudgetExhausted);
    }
    let mut out = Vec::new();
    for &i in &state.uncovered_sections {
        let excerpt = doc.section_text(i);
        if excerpt.trim().is_empty() || !relevant(&excerpt) {
            continue;
        }
        let kind = ResearcherKind::route(&excerpt);
        let heading = &doc.sections[i].heading;
        out.push(ResearcherAssignment {
            researcher_kind: kind,
            context_note: format!("section {i} \"{heading}\"; extract {} rule", kind_label(kind)),
            excerpt,
            section: i,
        });
    }
    Ok(out)
}

fn kind_label(kind: ResearcherKind) -> &'static str {
    match kind {
        ResearcherKind::Power => "the power",
        ResearcherKind::Temperature => "the temperature",
        ResearcherKind::Humidity => "the humidity",
        ResearcherKind::Generic => "any",
    }
}

pub struct ResearchOutput {
    pub candidates: Vec<CandidateRule>,
    pub trace: Vec<TraceEntry>,
    pub chars: usize,
}

/// A researcher's think/act loop. A reply may ask for one snippet by
/// heading, answered from the document, and the loop stops when the
/// backend says so or the step cap is reached (candidates then partial).
pub fn run_researcher(
    assignment: &ResearcherAssignment,
    doc: &SanitizedDocument,
    backend: &dyn ReasoningBackend,
    step_cap: usize,
    iteration: usize,
) -> Result<ResearchOutput, ExtractionError> {
    let mut out = ResearchOutput { candidates: Vec::new(), trace: Vec::new(), chars: 0 };
    if assignment.excerpt.trim().is_empty() {
        return Ok(out);
    }
    let headings: Vec<String> = doc.sections.iter().map(|s| s.heading.clone()).filter(|h| !h.is_empty()).collect();
    let mut snippets: Vec<(String, String)> = Vec::new();
    let mut finished = false;
    for cycle in 0..step_cap {
        let req = StepRequest {
            researcher_kind: assignment.researcher_kind,
            excerpt: assignment.excerpt.clone(),
            context_note: assignment.context_note.clone(),
            headings: headings.clone(),
            snippets: snippets.clone(),
            cycle,
        };
        let chars = req.char_len();
        out.chars += chars;
        let reply = backend.step(&req)?;
        let mut action = String::new();
        out.candidates = reply.candidates.into_iter().filter(CandidateRule::schema_valid).collect();
        for c in &mut out.candidates {
            c.source_section.get_or_insert(assignment.section);
        }
        if !out.candidates.is_empty() {
            action = format!("emit {} candidate(s)", out.candidates.len());
        }
        let mut requested = false;
        if let Some(h) = reply.request_snippet.filter(|_| !reply.done) {
            let text = doc
                .section_by_heading(&h)
                .map(|(i, _)| doc.section_text(i))
                .unwrap_or_default();
            if !action.is_empty() {
                action.push_str("; ");
            }
            action.push_str(&format!("request snippet \"{h}\" ({} chars)", text.len()));
            if !snippets.iter().any(|(k, _)| k == &h) {
                snippets.push((h, text));
                requested = true;
            }
        }
        if reply.done {
            action.push_str(if action.is_empty() { "finish" } else { "; finish" });
        }
        out.trace.push(TraceEntry {
            iteration,
            node: Node::Research,
            researcher: Some(assignment.researcher_kind),
            cycle: Some(cycle),
            thought: reply.thought,
            action,
            chars,
        });
        if reply.done || !requested {
            finished = reply.done;
            break;
        }
    }
    if !finished {
        for c in &mut out.candidates {
            c.confidence = Confidence::Partial;
        }
    }
    Ok(out)
}

fn union_bands(a: &ThresholdBands, b: &ThresholdBands) -> ThresholdBands {
    let mut out = a.clone();
    for (level, iv) in b.tagged() {
        let band = out.band_mut(level);
        if !band.contains(iv) {
            band.push(*iv);
        }
    }
    out
}

/// Fill gaps in `a` from `b`; `Err` when both carry different values.
fn merge_pair(a: &CandidateRule, b: &CandidateRule) -> Result<CandidateRule, String> {
    let mut m = a.clone();
    let metric = &a.metric;
    m.thresholds = match (&a.thresholds, &b.thresholds) {
        (Thresholds::Bands(x), Thresholds::Bands(y)) => {
            let u = union_bands(x, y);
            let x_ok = x.partition_problems().is_empty();
            let y_ok = y.partition_problems().is_empty();
            if !u.partition_problems().is_empty() && (x_ok || y_ok) {
                return Err(format!("conflicting thresholds for {metric}"));
            }
            Thresholds::Bands(u)
        }
        (Thresholds::Bands(x), _) | (_, Thresholds::Bands(x)) => Thresholds::Bands(x.clone()),
        (x, _) => x.clone(),
    };
    match (a.aggregation_window_s, b.aggregation_window_s) {
        (Some(x), Some(y)) if x != y => return Err(format!("conflicting aggregation windows for {metric}: {x} s and {y} s")),
        (x, y) => m.aggregation_window_s = x.or(y),
    }
    match (a.credit_pct, b.credit_pct) {
        (Some(x), Some(y)) if x != y => return Err(format!("conflicting credits for {metric}")),
        (None, Some(y)) => {
            m.credit_pct = Some(y);
            m.violation_impact.clone_from(&b.violation_impact);
        }
        _ => {}
    }
    if m.comment_text.is_empty() {
        m.comment_text.clone_from(&b.comment_text);
    }
    if m.sla_tier.is_empty() {
        m.sla_tier.clone_from(&b.sla_tier);
    }
    m.source_section = a.source_section.or(b.source_section);
    m.confidence = if a.confidence == Confidence::Complete || b.confidence == Confidence::Complete {
        Confidence::Complete
    } else {
        Confidence::Partial
    };
    Ok(m)
}

/// Merge duplicate-metric candidates and check each for the fields a rule needs.
pub fn verify_rules(candidates: &[CandidateRule], doc: Option<&SanitizedDocument>) -> Verdict {
    let mut merged: Vec<CandidateRule> = Vec::new();
    let mut conflicts = Vec::new();
    let mut conflicted: BTreeSet<usize> = BTreeSet::new();
    for c in candidates {
        let slot = merged.iter().position(|m| !c.metric.is_empty() && m.metric == c.metric);
        match slot {
            None => merged.push(c.clone()),
            Some(i) => match merge_pair(&merged[i], c) {
                Ok(m) => merged[i] = m,
                Err(why) => {
                    if !conflicts.contains(&why) {
                        conflicts.push(why);
                    }
                    conflicted.insert(i);
                }
            },
        }
    }
    let mut missing_items = Vec::new();
    for (i, c) in merged.iter().enumerate() {
        let mut fields = c.missing_fields();
        if conflicted.contains(&i) && !fields.contains(&MissingField::Thresholds) {
            fields.push(MissingField::Thresholds);
        }
        missing_items.extend(fields.into_iter().map(|f| (i, f)));
    }
    let mut follow_up_assignments = Vec::new();
    if let Some(doc) = doc {
        let mut by_candidate: BTreeMap<usize, Vec<&'static str>> = BTreeMap::new();
        for (i, f) in &missing_items {
            by_candidate.entry(*i).or_default().push(f.as_str());
        }
        for (i, fields) in by_candidate {
            let c = &merged[i];
            let Some(section) = c.source_section.filter(|s| *s < doc.sections.len()) else { continue };
            let kind = c.metric().map_or(ResearcherKind::Generic, ResearcherKind::for_metric);
            follow_up_assignments.push(ResearcherAssignment {
                researcher_kind: kind,
                excerpt: doc.section_text(section),
                context_note: format!("follow-up for {}; missing: {}", c.metric, fields.join(", ")),
                section,
            });
        }
    }
    let status = if missing_items.is_empty() { VerdictStatus::Complete } else { VerdictStatus::Incomplete };
    Verdict { status, missing_items, follow_up_assignments, merged, conflicts }
}

/// `Customer_A` -> `A`.
fn customer_code(alias: &str) -> String {
    let tail = alias.rsplit(['_', ' ']).next().unwrap_or(alias);
    let code: String = tail.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_uppercase();
    if code.is_empty() {
        "X".into()
    } else {
        code
    }
}

/// A verified candidate as a rule, if every field is present and valid.
pub fn to_rule_spec(c: &CandidateRule, customer: &str) -> Option<RuleSpec> {
    let metric = c.metric()?;
    let mut bands = c.thresholds.bands()?.clone();
    for level in ViolationLevel::ALL {
        bands.band_mut(level).sort_by(|a, b| a.cmp_lower(b));
    }
    let rule = RuleSpec {
        rule_id: format!("CUST_{}_{}_01", customer_code(customer), metric.rule_code()),
        customer: customer.to_string(),
        metric,
        aggregation_window_s: c.aggregation_window_s?,
        aggregation_kind: AggregationKind::Mean,
        bands,
        credit_pct: c.credit_pct?,
        version: 1,
        updated_at: String::new(),
        comment_text: c.comment_text.clone(),
    };
    validate_rule(&rule).ok().map(|_| rule)
}

/// Run the orchestrator to completion.
///
/// Returns `Incomplete` (carrying the partial rules and open questions)
/// when verification still fails at the iteration or budget cap, when an
/// expected metric was never found, or when no rule was extracted at all.
pub fn extract_rules(
    doc: &SanitizedDocument,
    backend: &dyn ReasoningBackend,
    cfg: &ExtractionConfig,
) -> Result<Extraction, ExtractionError> {
    let mut state = AgentState::new(doc, cfg.char_budget);
    let mut trace = Vec::new();
    let mut node = Node::Orchestrate;
    let mut pending: Vec<ResearcherAssignment> = Vec::new();
    let mut verdict: Option<Verdict> = None;
    let note = |trace: &mut Vec<TraceEntry>, iteration, node, thought: String, action: String| {
        trace.push(TraceEntry { iteration, node, researcher: None, cycle: None, thought, action, chars: 0 });
    };

    while node != Node::Done {
        match node {
            Node::Orchestrate => {
                if state.iteration >= cfg.max_iterations {
                    state.open_questions.push(format!("iteration cap of {} reached", cfg.max_iterations));
                    node = Node::Done;
                    continue;
                }
                state.iteration += 1;
                let mut work = std::mem::take(&mut pending);
                match plan_assignments(doc, &state) {
                    Ok(a) => work.extend(a),
                    Err(ExtractionError::BudgetExhausted) => {
                        state.open_questions.push("character budget exhausted".into());
                        node = Node::Done;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                let kinds: Vec<String> =
                    work.iter().map(|a| format!("{:?}@{}", a.researcher_kind, a.section).to_lowercase()).collect();
                note(
                    &mut trace,
                    state.iteration,
                    Node::Orchestrate,
                    format!("{} uncovered section(s), {} hypotheses", state.uncovered_sections.len(), state.hypotheses.len()),
                    format!("dispatch [{}]", kinds.join(", ")),
                );
                // every uncovered section has now been looked at
                state.uncovered_sections.clear();
                pending = work;
                node = if pending.is_empty() { Node::Verify } else { Node::Research };
            }
            Node::Research => {
                let work = std::mem::take(&mut pending);
                let results: Vec<Result<ResearchOutput, ExtractionError>> = std::thread::scope(|s| {
                    let handles: Vec<_> = work
                        .iter()
                        .map(|a| s.spawn(|| run_researcher(a, doc, backend, cfg.step_cap, state.iteration)))
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("researcher thread panicked")).collect()
                });
                for r in results {
                    let r = r?;
                    state.token_budget_remaining -= r.chars as i64;
                    trace.extend(r.trace);
                    state.hypotheses.extend(r.candidates);
                }
                node = Node::Verify;
            }
            Node::Verify => {
                let v = verify_rules(&state.hypotheses, Some(doc));
                let missing: Vec<String> =
                    v.missing_items.iter().map(|(i, f)| format!("{}.{}", v.merged[*i].metric, f.as_str())).collect();
                note(
                    &mut trace,
                    state.iteration,
                    Node::Verify,
                    format!("{} candidate(s) merged into {}", state.hypotheses.len(), v.merged.len()),
                    match v.status {
                        VerdictStatus::Complete => "complete".into(),
                        VerdictStatus::Incomplete => format!("incomplete: {}", missing.join(", ")),
                    },
                );
                let progressed = verdict.as_ref().is_none_or(|prev| prev.merged != v.merged);
                if !progressed && v.status == VerdictStatus::Incomplete {
                    state.open_questions.push("follow-up research made no progress".into());
                }
                state.hypotheses = v.merged.clone();
                let again =
                    progressed && v.status == VerdictStatus::Incomplete && !v.follow_up_assignments.is_empty();
                if again {
                    pending = v.follow_up_assignments.clone();
                }
                verdict = Some(v);
                node = if again { Node::Orchestrate } else { Node::Done };
            }
            Node::Done => {}
        }
    }

    let v = verdict.unwrap_or_else(|| verify_rules(&state.hypotheses, Some(doc)));
    let mut open = state.open_questions;
    open.extend(v.conflicts.iter().cloned());
    for (i, f) in &v.missing_items {
        let m = &v.merged[*i];
        let name = if m.metric.is_empty() { format!("candidate {i}") } else { m.metric.clone() };
        open.push(format!("{name}: missing {}", f.as_str()));
    }
    let customer = doc.customer_alias.clone();
    let mut rules = Vec::new();
    for c in &v.merged {
        if let Some(r) = to_rule_spec(c, &customer) {
            if !rules.iter().any(|x: &RuleSpec| x.rule_id == r.rule_id) {
                rules.push(r);
            }
        }
    }
    for m in &cfg.expected_metrics {
        if !rules.iter().any(|r| r.metric == *m) && !v.merged.iter().any(|c| c.metric() == Some(*m)) {
            open.push(format!("no {} clause found ({} rule missing)", m.as_str(), metric_word(*m)));
        }
    }
    if customer.is_empty() {
        open.push("document has no customer alias".into());
    }
    let out = Extraction {
        rules: RuleSet::new(rules),
        open_questions: open,
        verdict: Some(v),
        iterations: state.iteration,
        budget_remaining: state.token_budget_remaining,
        trace,
    };
    if out.rules.is_empty() || !out.open_questions.is_empty() {
        return Err(ExtractionError::Incomplete(Box::new(out)));
    }
    Ok(out)
}

fn metric_word(m: Metric) -> &'static str {
    match m {
        Metric::PowerKw => "power",
        Metric::TemperatureC => "temperature",
        Metric::HumidityRh => "humidity",
    }
}
