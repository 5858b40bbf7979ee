use std::sync::OnceLock;

use regex::Regex;

use super::{DocError, ParseFlag, ParsedDocument, RawDocument, Section, SourceFormat, Table};

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static pattern"))
}

fn md_heading(line: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"^#{1,6}\s+(.+?)\s*#*$").captures(line).map(|c| c[1].to_string())
}

/// "1. Power SLA", "2.3 Exclusions": short, numbered, no sentence ending.
fn numbered_heading(line: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let c = re(&RE, r"^(\d+(?:\.\d+)*)[.)]?\s+(\S.*)$").captures(line)?;
    let text = c[2].trim();
    let sentence = text.ends_with('.') || text.ends_with(':') || text.ends_with(';');
    let starts_upper = text.chars().next().is_some_and(char::is_uppercase);
    (text.len() <= 60 && !sentence && starts_upper).then(|| line.to_string())
}

fn caps_heading(line: &str) -> Option<String> {
    let letters: Vec<char> = line.chars().filter(|c| c.is_alphabetic()).collect();
    let ok = letters.len() >= 3
        && line.len() <= 80
        && letters.iter().all(|c| c.is_uppercase())
        && !line.contains(['|', '$', '@'])
        && line.chars().filter(char::is_ascii_digit).count() * 2 <= letters.len()
        && !line.trim_end().ends_with('.');
    ok.then(|| line.trim().trim_end_matches(':').to_string())
}

fn bullet(line: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"^\s*(?:[-*\u{2022}]|\([a-z0-9]{1,3}\)|[a-z]\))\s+(.+)$").captures(line).map(|c| c[1].trim().to_string())
}

fn is_table_line(line: &str) -> bool {
    let t = line.trim();
    t.starts_with('|') && t.matches('|').count() >= 2
}

fn is_separator(line: &str) -> bool {
    let t = line.trim();
    t.contains('-') && t.chars().all(|c| matches!(c, '|' | '-' | ':' | ' '))
}

fn cells(line: &str) -> Vec<String> {
    let t = line.trim();
    let t = t.strip_prefix('|').unwrap_or(t);
    let t = t.strip_suffix('|').unwrap_or(t);
    t.split('|').map(|c| c.trim().to_string()).collect()
}

fn flush_paragraph(buf: &mut Vec<String>, section: &mut Section) {
    if !buf.is_empty() {
        section.paragraphs.push(buf.join(" "));
        buf.clear();
    }
}

fn parse_text(raw: &RawDocument) -> ParsedDocument {
    let lines: Vec<&str> = raw.body.lines().collect();
    let mut sections: Vec<Section> = Vec::new();
    let mut tables = Vec::new();
    let mut current = Section::default();
    let mut para: Vec<String> = Vec::new();
    let mut saw_heading = false;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim_end();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush_paragraph(&mut para, &mut current);
            i += 1;
            continue;
        }
        if is_table_line(trimmed) {
            flush_paragraph(&mut para, &mut current);
            let mut block = Vec::new();
            while i < lines.len() && is_table_line(lines[i]) {
                if !is_separator(lines[i]) {
                    block.push(cells(lines[i]));
                }
                i += 1;
            }
            if let Some((header, rows)) = block.split_first() {
                let section_index = sections.len();
                tables.push(Table { section: Some(section_index), header: header.clone(), rows: rows.to_vec() });
            }
            continue;
        }
        let heading = md_heading(trimmed)
            .or_else(|| numbered_heading(trimmed))
            .or_else(|| caps_heading(trimmed));
        if let Some(h) = heading {
            flush_paragraph(&mut para, &mut current);
            if saw_heading || current != Section::default() {
                sections.push(std::mem::take(&mut current));
            }
            current.heading = h;
            saw_heading = true;
        } else if let Some(b) = bullet(trimmed) {
            flush_paragraph(&mut para, &mut current);
            current.bullets.push(b);
        } else {
            para.push(trimmed.to_string());
        }
        i += 1;
    }
    flush_paragraph(&mut para, &mut current);
    if saw_heading || current != Section::default() {
        sections.push(current);
    }
    let mut flags = Vec::new();
    if !saw_heading && tables.is_empty() && lines.len() > 50 {
        flags.push(ParseFlag::UnrecognizedFormat);
    }
    ParsedDocument { doc_id: raw.doc_id.clone(), source_format: raw.source_format, sections, tables, flags }
}

fn parse_csv(raw: &RawDocument) -> Result<ParsedDocument, DocError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(raw.body.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(ParsedDocument {
        doc_id: raw.doc_id.clone(),
        source_format: SourceFormat::Csv,
        sections: vec![Section { heading: raw.doc_id.clone(), ..Section::default() }],
        tables: vec![Table { section: Some(0), header, rows }],
        flags: Vec::new(),
    })
}

/// Split raw text into sections, bullets and tables.
pub fn parse_document(raw: &RawDocument) -> Result<ParsedDocument, DocError> {
    if raw.body.trim().is_empty() {
        return Err(DocError::EmptyDocument(raw.doc_id.clone()));
    }
    match raw.source_format {
        SourceFormat::Csv => parse_csv(raw),
        SourceFormat::PlainText | SourceFormat::Markdown => Ok(parse_text(raw)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str) -> RawDocument {
        RawDocument { doc_id: "d".into(), source_format: SourceFormat::Markdown, body: body.into() }
    }

    #[test]
    fn heading_with_bullets() {
        let p = parse_document(&doc("## Power SLA\n- one\n- two\n* three\n")).unwrap();
        assert_eq!(p.sections.len(), 1);
        assert_eq!(p.sections[0].heading, "Power SLA");
        assert_eq!(p.sections[0].bullets, vec!["one", "two", "three"]);
    }

    #[test]
    fn pipe_table() {
        let body = "| Metric | Threshold | Credit |\n|---|---|---|\n| a | b | c |\n| d | e | f |\n| g | h | i |\n";
        let p = parse_document(&doc(body)).unwrap();
        assert_eq!(p.tables.len(), 1);
        assert_eq!(p.tables[0].header, vec!["Metric", "Threshold", "Credit"]);
        assert_eq!(p.tables[0].rows.len(), 3);
    }

    #[test]
    fn other_heading_styles() {
        let p = parse_document(&doc("SERVICE LEVELS\ntext here\n1. Power SLA\n(a) first\n2.1 Billing credits\n")).unwrap();
        let heads: Vec<&str> = p.sections.iter().map(|s| s.heading.as_str()).collect();
        assert_eq!(heads, vec!["SERVICE LEVELS", "1. Power SLA", "2.1 Billing credits"]);
        assert_eq!(p.sections[1].bullets, vec!["first"]);
        let clause = parse_document(&doc("1. The provider shall maintain power.\n")).unwrap();
        assert_eq!(clause.sections[0].heading, "");
        assert_eq!(clause.sections[0].paragraphs.len(), 1);
    }

    #[test]
    fn empty_and_unrecognized() {
        assert!(matches!(parse_document(&doc("  \n\n")), Err(DocError::EmptyDocument(_))));
        let long = "plain words here\n".repeat(60);
        let p = parse_document(&RawDocument { source_format: SourceFormat::PlainText, ..doc(&long) }).unwrap();
        assert_eq!(p.flags, vec![ParseFlag::UnrecognizedFormat]);
    }

    #[test]
    fn csv_body() {
        let raw = RawDocument { doc_id: "t".into(), source_format: SourceFormat::Csv, body: "a,b\n1,2\n3,4\n".into() };
        let p = parse_document(&raw).unwrap();
        assert_eq!(p.tables[0].rows, vec![vec!["1", "2"], vec!["3", "4"]]);
    }
}
