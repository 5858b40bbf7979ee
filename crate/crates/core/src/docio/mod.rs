//! Contract text ingestion: sectioning, table recovery and PII scrubbing.

mod parse;
mod pii;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::parse_document;
pub use pii::{pii_matches, scrub_pii, DictionaryEntry, EntityKind, PatternSpec, PiiConfig, PiiMatch};

#[derive(Debug, Error)]
pub enum DocError {
    #[error("document {0} is empty")]
    EmptyDocument(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("pii config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceFormat {
    #[serde(rename = "plain-text")]
    PlainText,
    #[serde(rename = "markdown-like")]
    Markdown,
    #[serde(rename = "tabular-csv")]
    Csv,
}

impl SourceFormat {
    /// Guess from a file extension; anything unknown is plain text.
    pub fn from_path(path: &Path) -> SourceFormat {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("md" | "markdown") => SourceFormat::Markdown,
            Some("csv") => SourceFormat::Csv,
            _ => SourceFormat::PlainText,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub source_format: SourceFormat,
    pub body: String,
}

impl RawDocument {
    pub fn from_file(path: &Path) -> Result<RawDocument, DocError> {
        let bytes = fs::read(path)?;
        // tolerate a BOM and Windows line endings
        let text = String::from_utf8_lossy(&bytes).trim_start_matches('\u{feff}').replace("\r\n", "\n");
        let doc_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("document").to_string();
        Ok(RawDocument { doc_id, source_format: SourceFormat::from_path(path), body: text })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub paragraphs: Vec<String>,
    pub bullets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    /// Index of the section the table appeared under.
    pub section: Option<usize>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFlag {
    /// Long body without any recognizable heading or table.
    UnrecognizedFormat,
}

/// Sectioned document before scrubbing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDocument {
    pub doc_id: String,
    pub source_format: SourceFormat,
    pub sections: Vec<Section>,
    pub tables: Vec<Table>,
    pub flags: Vec<ParseFlag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizedDocument {
    pub doc_id: String,
    pub customer_alias: String,
    pub sections: Vec<Section>,
    pub tables: Vec<Table>,
    pub redaction_count: usize,
}

impl SanitizedDocument {
    /// View as an unscrubbed document, e.g. to scrub again.
    pub fn to_parsed(&self) -> ParsedDocument {
        ParsedDocument {
            doc_id: self.doc_id.clone(),
            source_format: SourceFormat::Markdown,
            sections: self.sections.clone(),
            tables: self.tables.clone(),
            flags: Vec::new(),
        }
    }

    /// Section by exact (case-insensitive) heading.
    pub fn section_by_heading(&self, heading: &str) -> Option<(usize, &Section)> {
        self.sections.iter().enumerate().find(|(_, s)| s.heading.eq_ignore_ascii_case(heading.trim()))
    }

    /// All text of one section, tables included, in reading order.
    pub fn section_text(&self, index: usize) -> String {
        let Some(s) = self.sections.get(index) else {
            return String::new();
        };
        let mut out = Vec::new();
        if !s.heading.is_empty() {
            out.push(s.heading.clone());
        }
        out.extend(s.paragraphs.iter().cloned());
        out.extend(s.bullets.iter().map(|b| format!("- {b}")));
        for t in self.tables.iter().filter(|t| t.section == Some(index)) {
            out.push(format!("| {} |", t.header.join(" | ")));
            for r in &t.rows {
                out.push(format!("| {} |", r.join(" | ")));
            }
        }
        out.join("\n")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, DocError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.doc_id));
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<SanitizedDocument, DocError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Placeholder -> SHA-256 of the original text. Originals are never kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactionMap {
    pub doc_id: String,
    pub policy_version: String,
    pub entries: std::collections::BTreeMap<String, String>,
}

impl RedactionMap {
    /// Append one JSON line to the map journal.
    pub fn append_to(&self, path: &Path) -> Result<(), DocError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}
