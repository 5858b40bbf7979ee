//! Dictionary and pattern based PII replacement with stable placeholders.

use std::collections::BTreeMap;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use super::{DocError, ParsedDocument, RedactionMap, SanitizedDocument, Section, Table};
use crate::canonical::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Customer,
    Facility,
    Person,
    Email,
    Phone,
    Address,
    Other,
}

impl EntityKind {
    fn placeholder(self, n: usize) -> String {
        match self {
            EntityKind::Customer => format!("Customer_{}", letters(n)),
            EntityKind::Facility => format!("Facility_{}", n + 1),
            EntityKind::Person => format!("PERSON_{}", n + 1),
            EntityKind::Email => format!("EMAIL_{}", n + 1),
            EntityKind::Phone => format!("PHONE_{}", n + 1),
            EntityKind::Address => format!("ADDRESS_{}", n + 1),
            EntityKind::Other => format!("ENTITY_{}", n + 1),
        }
    }
}

/// 0 -> A, 25 -> Z, 26 -> AA.
fn letters(mut n: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub term: String,
    pub kind: EntityKind,
    /// Fixed placeholder, for aliases that must match across documents.
    #[serde(default)]
    pub alias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kind: EntityKind,
    pub regex: String,
    /// Capture group holding the sensitive text (0 = whole match).
    #[serde(default)]
    pub group: usize,
}

/// PII policy: a dictionary of known names plus regular expressions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiConfig {
    pub policy_version: String,
    #[serde(default)]
    pub dictionary: Vec<DictionaryEntry>,
    #[serde(default = "default_patterns")]
    pub patterns: Vec<PatternSpec>,
}

fn default_patterns() -> Vec<PatternSpec> {
    let p = |kind, regex: &str, group| PatternSpec { kind, regex: regex.to_string(), group };
    vec![
        p(EntityKind::Email, r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}", 0),
        p(EntityKind::Phone, r"(?:\+\d{1,3}[\s.-]?)?\(?\b\d{3}\)?[\s.-]\d{3}[\s.-]\d{4}\b", 0),
        p(
            EntityKind::Address,
            r"\b\d{1,6}\s+(?:[A-Z][A-Za-z]*\.?\s+){1,4}(?:Street|St\.|Avenue|Ave\.|Road|Rd\.|Boulevard|Blvd\.|Drive|Dr\.|Lane|Ln\.|Way|Court|Ct\.|Parkway|Pkwy\.)(?:,?\s+(?:Suite|Ste\.|Floor)\s+\w+)?",
            0,
        ),
        p(
            EntityKind::Person,
            r"(?m)(?i:by|name|signed|signature|attn|contact)\s*:\s*([A-Z][a-z]+(?:[ \t]+[A-Z]\.)?(?:[ \t]+[A-Z][a-z]+(?:-[A-Z][a-z]+)?)+)",
            1,
        ),
    ]
}

impl Default for PiiConfig {
    fn default() -> Self {
        Self { policy_version: "pii-policy-1".into(), dictionary: Vec::new(), patterns: default_patterns() }
    }
}

impl PiiConfig {
    pub fn from_toml(text: &str) -> Result<PiiConfig, DocError> {
        let cfg: PiiConfig = toml::from_str(text).map_err(|e| DocError::Config(e.to_string()))?;
        cfg.compile()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PiiConfig, DocError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn compile(&self) -> Result<Compiled, DocError> {
        let mut matchers = Vec::new();
        for (i, d) in self.dictionary.iter().enumerate() {
            if d.term.trim().is_empty() {
                return Err(DocError::Config(format!("dictionary entry {i} has an empty term")));
            }
            let escaped = regex::escape(d.term.trim());
            let word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
            let pre = if word(d.term.trim().chars().next()) { r"\b" } else { "" };
            let post = if word(d.term.trim().chars().last()) { r"\b" } else { "" };
            let re = RegexBuilder::new(&format!("{pre}{escaped}{post}"))
                .case_insensitive(true)
                .build()
                .map_err(|e| DocError::Config(e.to_string()))?;
            matchers.push(Matcher { kind: d.kind, re, group: 0, dictionary: Some(i) });
        }
        for p in &self.patterns {
            let re = Regex::new(&p.regex).map_err(|e| DocError::Config(format!("{}: {e}", p.regex)))?;
            if p.group >= re.captures_len() {
                return Err(DocError::Config(format!("pattern {} has no group {}", p.regex, p.group)));
            }
            matchers.push(Matcher { kind: p.kind, re, group: p.group, dictionary: None });
        }
        Ok(Compiled { matchers })
    }
}

struct Matcher {
    kind: EntityKind,
    re: Regex,
    group: usize,
    dictionary: Option<usize>,
}

struct Compiled {
    matchers: Vec<Matcher>,
}

impl Compiled {
    /// Names caught by a person pattern anywhere are redacted everywhere.
    fn add_seen_people<'t>(&mut self, texts: impl Iterator<Item = &'t String>) {
        let mut names: Vec<String> = Vec::new();
        for t in texts {
            for m in self.find(t) {
                if m.kind == EntityKind::Person && m.dictionary.is_none() && !names.contains(&m.text) {
                    names.push(m.text);
                }
            }
        }
        for n in names {
            let pattern = format!(r"\b{}\b", regex::escape(&n).replace(' ', r"\s+"));
            let re = Regex::new(&pattern).expect("escaped name");
            self.matchers.push(Matcher { kind: EntityKind::Person, re, group: 0, dictionary: None });
        }
    }
}

fn all_text(doc: &ParsedDocument) -> impl Iterator<Item = &String> {
    doc.sections
        .iter()
        .flat_map(|s| std::iter::once(&s.heading).chain(&s.paragraphs).chain(&s.bullets))
        .chain(doc.tables.iter().flat_map(|t| t.header.iter().chain(t.rows.iter().flatten())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PiiMatch {
    pub kind: EntityKind,
    pub start: usize,
    pub end: usize,
    pub text: String,
    dictionary: Option<usize>,
}

impl Compiled {
    /// Non-overlapping matches: leftmost first, then longest, then
    /// dictionary entries over patterns.
    fn find(&self, text: &str) -> Vec<PiiMatch> {
        let mut all = Vec::new();
        for m in &self.matchers {
            for caps in m.re.captures_iter(text) {
                if let Some(g) = caps.get(m.group) {
                    if !g.as_str().is_empty() {
                        all.push(PiiMatch {
                            kind: m.kind,
                            start: g.start(),
                            end: g.end(),
                            text: g.as_str().to_string(),
                            dictionary: m.dictionary,
                        });
                    }
                }
            }
        }
        all.sort_by(|a, b| {
            a.start
                .cmp(&b.start)
                .then((b.end - b.start).cmp(&(a.end - a.start)))
                .then(b.dictionary.is_some().cmp(&a.dictionary.is_some()))
        });
        let mut chosen: Vec<PiiMatch> = Vec::new();
        for m in all {
            if chosen.last().is_none_or(|c| m.start >= c.end) {
                chosen.push(m);
            }
        }
        chosen
    }
}

/// Assigns placeholders in first-seen order.
struct Aliaser<'a> {
    config: &'a PiiConfig,
    assigned: BTreeMap<(EntityKind, String), String>,
    counters: BTreeMap<EntityKind, usize>,
    reserved: Vec<String>,
    map: RedactionMap,
    count: usize,
    first_customer: Option<String>,
}

impl Aliaser<'_> {
    fn key(&self, m: &PiiMatch) -> (EntityKind, String) {
        match m.dictionary {
            Some(i) => (m.kind, self.config.dictionary[i].term.trim().to_lowercase()),
            None if m.kind == EntityKind::Email => (m.kind, m.text.to_lowercase()),
            None => (m.kind, m.text.split_whitespace().collect::<Vec<_>>().join(" ")),
        }
    }

    fn placeholder(&mut self, m: &PiiMatch) -> String {
        let key = self.key(m);
        if let Some(p) = self.assigned.get(&key) {
            return p.clone();
        }
        let pinned = m.dictionary.and_then(|i| self.config.dictionary[i].alias.clone());
        let p = match pinned {
            Some(p) => p,
            None => loop {
                let n = self.counters.entry(m.kind).or_insert(0);
                let candidate = m.kind.placeholder(*n);
                *n += 1;
                if !self.reserved.contains(&candidate) {
                    break candidate;
                }
            },
        };
        self.map.entries.insert(p.clone(), sha256_hex(key.1.as_bytes()));
        if m.kind == EntityKind::Customer && self.first_customer.is_none() {
            self.first_customer = Some(p.clone());
        }
        self.assigned.insert(key, p.clone());
        p
    }

    fn scrub(&mut self, compiled: &Compiled, text: &str) -> String {
        let matches = compiled.find(text);
        if matches.is_empty() {
            return text.to_string();
        }
        let mut out = String::with_capacity(text.len());
        let mut at = 0;
        for m in &matches {
            out.push_str(&text[at..m.start]);
            out.push_str(&self.placeholder(m));
            self.count += 1;
            at = m.end;
        }
        out.push_str(&text[at..]);
        out
    }
}

/// Replace every PII match with a placeholder. Text is visited in reading
/// order (per section: heading, paragraphs, bullets, then its tables).
pub fn scrub_pii(doc: &ParsedDocument, config: &PiiConfig) -> Result<(SanitizedDocument, RedactionMap), DocError> {
    let mut compiled = config.compile()?;
    compiled.add_seen_people(all_text(doc));
    let mut al = Aliaser {
        config,
        assigned: BTreeMap::new(),
        counters: BTreeMap::new(),
        reserved: config.dictionary.iter().filter_map(|d| d.alias.clone()).collect(),
        map: RedactionMap { doc_id: doc.doc_id.clone(), policy_version: config.policy_version.clone(), ..Default::default() },
        count: 0,
        first_customer: None,
    };
    let mut tables: Vec<Option<Table>> = vec![None; doc.tables.len()];
    let scrub_table = |al: &mut Aliaser, t: &Table| Table {
        section: t.section,
        header: t.header.iter().map(|c| al.scrub(&compiled, c)).collect(),
        rows: t.rows.iter().map(|r| r.iter().map(|c| al.scrub(&compiled, c)).collect()).collect(),
    };
    let mut sections = Vec::with_capacity(doc.sections.len());
    for (si, s) in doc.sections.iter().enumerate() {
        sections.push(Section {
            heading: al.scrub(&compiled, &s.heading),
            paragraphs: s.paragraphs.iter().map(|p| al.scrub(&compiled, p)).collect(),
            bullets: s.bullets.iter().map(|b| al.scrub(&compiled, b)).collect(),
        });
        for (ti, t) in doc.tables.iter().enumerate().filter(|(_, t)| t.section == Some(si)) {
            tables[ti] = Some(scrub_table(&mut al, t));
        }
    }
    for (ti, t) in doc.tables.iter().enumerate() {
        if tables[ti].is_none() {
            tables[ti] = Some(scrub_table(&mut al, t));
        }
    }
    // an already-sanitized document keeps its alias
    let customer_alias = al.first_customer.clone().or_else(|| existing_alias(doc)).unwrap_or_default();
    Ok((
        SanitizedDocument {
            doc_id: doc.doc_id.clone(),
            customer_alias,
            sections,
            tables: tables.into_iter().map(|t| t.expect("every table scrubbed")).collect(),
            redaction_count: al.count,
        },
        al.map,
    ))
}

fn existing_alias(doc: &ParsedDocument) -> Option<String> {
    let re = Regex::new(r"\bCustomer_[A-Z]+\b").expect("static pattern");
    let texts = doc.sections.iter().flat_map(|s| {
        std::iter::once(&s.heading).chain(s.paragraphs.iter()).chain(s.bullets.iter())
    });
    texts.filter_map(|t| re.find(t)).map(|m| m.as_str().to_string()).next()
}

/// Every configured-pattern match remaining in a sanitized document.
pub fn pii_matches(doc: &SanitizedDocument, config: &PiiConfig) -> Result<Vec<PiiMatch>, DocError> {
    let compiled = config.compile()?;
    let mut found = Vec::new();
    for s in &doc.sections {
        for t in std::iter::once(&s.heading).chain(&s.paragraphs).chain(&s.bullets) {
            found.extend(compiled.find(t));
        }
    }
    for t in &doc.tables {
        for c in t.header.iter().chain(t.rows.iter().flatten()) {
            found.extend(compiled.find(c));
        }
    }
    Ok(found)
}
