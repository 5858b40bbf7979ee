//! Deterministic reading of threshold, window and credit clauses.

use std::sync::OnceLock;

use regex::Regex;

use crate::rulesdb::{CreditPct, Interval, Metric, ThresholdBands, ViolationLevel};

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static pattern"))
}

const NUM: &str = r"(-?\d+(?:\.\d+)?)";

fn keyword_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?i)humidity|%\s*rh\b|temperature|°\s*c\b|deg\s*c\b|power|\bkw\b")
}

fn keyword_metric(word: &str) -> Metric {
    let w = word.to_lowercase();
    if w.starts_with("hum") || w.contains("rh") {
        Metric::HumidityRh
    } else if w.starts_with("temp") || w.ends_with('c') {
        Metric::TemperatureC
    } else {
        Metric::PowerKw
    }
}

/// Distinct metrics named in free text, in `Metric::ALL` order.
pub fn metrics_in(text: &str) -> Vec<Metric> {
    let found: Vec<Metric> = keyword_re().find_iter(text).map(|m| keyword_metric(m.as_str())).collect();
    Metric::ALL.into_iter().filter(|m| found.contains(m)).collect()
}

/// The metric named in the text, when exactly one is.
pub fn metric_in(text: &str) -> Option<Metric> {
    match metrics_in(text).as_slice() {
        [m] => Some(*m),
        _ => None,
    }
}

/// The parts of `text` about `metric`: a segment runs from a keyword to
/// the next keyword of another metric. Text before the first keyword is
/// shared by all metrics.
pub fn segment_for(metric: Metric, text: &str) -> String {
    let mut out = String::new();
    let mut current: Option<Metric> = None;
    let mut start = 0;
    for m in keyword_re().find_iter(text) {
        let k = keyword_metric(m.as_str());
        if current != Some(k) {
            if current.is_none_or(|c| c == metric) {
                out.push_str(&text[start..m.start()]);
            }
            out.push('\n');
            current = Some(k);
            start = m.start();
        }
    }
    if current.is_none_or(|c| c == metric) {
        out.push_str(&text[start..]);
    }
    out
}

/// Operators and unicode comparison signs to ASCII; units after numbers dropped.
fn normalize(text: &str) -> String {
    static UNIT: OnceLock<Regex> = OnceLock::new();
    let t = text.replace('≤', "<=").replace('≥', ">=").replace('−', "-").replace("=<", "<=").replace("=>", ">=");
    re(&UNIT, r"(\d)\s*(?:kW|KW|kw|°\s*C|ºC|deg\s*C|%\s*RH|%RH|%)")
        .replace_all(&t, "$1")
        .into_owned()
}

/// Level named at the start of a clause ("Level 1:", "L2 -", "None:").
pub fn leading_level(text: &str) -> Option<(ViolationLevel, usize)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let c = re(
        &RE,
        r"(?i)^\s*(none|no\s+violation|compliant|normal|level\s*1|l1|level\s*2|l2)\b\s*(?:band|threshold)?\s*[:\-=]?\s*",
    )
    .captures(text)?;
    Some((level_word(&c[1])?, c.get(0).map_or(0, |m| m.end())))
}

fn level_word(word: &str) -> Option<ViolationLevel> {
    let w: String = word.to_lowercase().split_whitespace().collect();
    match w.as_str() {
        "none" | "noviolation" | "compliant" | "normal" => Some(ViolationLevel::None),
        "level1" | "l1" => Some(ViolationLevel::L1),
        "level2" | "l2" => Some(ViolationLevel::L2),
        _ => None,
    }
}

fn strict(op: &str) -> bool {
    !op.ends_with('=')
}

/// Intervals in a comparison clause. Alternatives are joined by "or".
pub fn intervals(text: &str) -> Vec<Interval> {
    static CHAIN: OnceLock<Regex> = OnceLock::new();
    static REV: OnceLock<Regex> = OnceLock::new();
    static FWD: OnceLock<Regex> = OnceLock::new();
    static SPLIT: OnceLock<Regex> = OnceLock::new();
    let chain = re(&CHAIN, &format!(r"{NUM}\s*(<=?)\s*[A-Za-z][\w]*\s*(<=?)\s*{NUM}"));
    let rev = re(&REV, &format!(r"{NUM}\s*(<=?|>=?)\s*[A-Za-z][\w]*"));
    let fwd = re(&FWD, &format!(r"[A-Za-z][\w]*\s*(<=?|>=?)\s*{NUM}"));
    let norm = normalize(text);
    let mut out = Vec::new();
    for part in re(&SPLIT, r"(?i)\bor\b|;").split(&norm) {
        if let Some(c) = chain.captures(part) {
            let (Ok(lo), Ok(hi)) = (c[1].parse::<f64>(), c[4].parse::<f64>()) else { continue };
            out.push(Interval::bounded(lo, !strict(&c[2]), hi, !strict(&c[3])));
        } else if let Some(c) = rev.captures(part) {
            let Ok(v) = c[1].parse::<f64>() else { continue };
            // "30 < P" is a lower bound on P
            let iv = match &c[2] {
                "<" => Interval::above(v, false),
                "<=" => Interval::above(v, true),
                ">" => Interval::below(v, false),
                _ => Interval::below(v, true),
            };
            out.push(iv);
        } else if let Some(c) = fwd.captures(part) {
            let Ok(v) = c[2].parse::<f64>() else { continue };
            let iv = match &c[1] {
                "<" => Interval::below(v, false),
                "<=" => Interval::below(v, true),
                ">" => Interval::above(v, false),
                _ => Interval::above(v, true),
            };
            out.push(iv);
        }
    }
    out
}

/// Averaging window in seconds ("5-min avg", "averaged over 15 minutes").
pub fn window_s(text: &str) -> Option<u64> {
    static A: OnceLock<Regex> = OnceLock::new();
    static B: OnceLock<Regex> = OnceLock::new();
    let unit = r"(min(?:ute)?s?|s(?:ec(?:ond)?s?)?|h(?:(?:ou)?rs?)?)\b";
    let a = re(&A, &format!(r"(?i)(\d+)\s*-?\s*{unit}\.?\s*(?:rolling\s+)?(?:avg|average|mean)"));
    let b = re(&B, &format!(r"(?i)(?:averaged?|mean)\s+over\s+(?:a\s+)?(\d+)\s*-?\s*{unit}"));
    let c = a.captures(text).or_else(|| b.captures(text))?;
    let n: u64 = c[1].parse().ok()?;
    let unit = c[2].to_lowercase();
    let scale = if unit.starts_with('m') {
        60
    } else if unit.starts_with('h') {
        3600
    } else {
        1
    };
    (n > 0).then_some(n * scale)
}

/// "None: 0%; L1: 5%; L2: 15%". L1 and L2 are required; a missing
/// none entry is 0.
pub fn credits(text: &str) -> Option<CreditPct> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let r = re(&RE, &format!(r"(?i)\b(none|l1|l2|level\s*1|level\s*2)\s*[:=]\s*{NUM}\s*%"));
    let (mut none, mut l1, mut l2) = (None, None, None);
    for c in r.captures_iter(text) {
        let v: f64 = c[2].parse().ok()?;
        match level_word(&c[1])? {
            ViolationLevel::None => none = none.or(Some(v)),
            ViolationLevel::L1 => l1 = l1.or(Some(v)),
            ViolationLevel::L2 => l2 = l2.or(Some(v)),
        }
    }
    Some(CreditPct { none: none.unwrap_or(0.0), l1: l1?, l2: l2? })
}

pub fn credit_text(c: &CreditPct) -> String {
    format!("None: {}%; L1: {}%; L2: {}%", c.none, c.l1, c.l2)
}

fn percent_cell(cell: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, &format!(r"^\s*{NUM}\s*%\s*(?:of\s+MRC)?\s*$")).captures(cell).and_then(|c| c[1].parse().ok())
}

/// Bands and credits collected from lines and table rows.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Reading {
    pub bands: ThresholdBands,
    pub levels_seen: Vec<ViolationLevel>,
    pub credit: Option<CreditPct>,
    pub window_s: Option<u64>,
}

impl Reading {
    fn add(&mut self, level: ViolationLevel, ivs: Vec<Interval>) {
        if ivs.is_empty() {
            return;
        }
        let band = self.bands.band_mut(level);
        for iv in ivs {
            if !band.contains(&iv) {
                band.push(iv);
            }
        }
        if !self.levels_seen.contains(&level) {
            self.levels_seen.push(level);
        }
    }

    pub fn finite_thresholds(&self) -> usize {
        self.bands.endpoints().len()
    }

    pub fn has_bands(&self) -> bool {
        !self.levels_seen.is_empty()
    }
}

/// Read every clause of an excerpt: lines of the form "Level: clause" and
/// pipe-table rows (cells joined by " | ").
pub fn read(text: &str) -> Reading {
    let mut r = Reading { window_s: window_s(text), ..Reading::default() };
    let mut row_credits: [Option<f64>; 3] = [None; 3];
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*', '•']).trim();
        if line.starts_with('|') {
            let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
            let Some(level) = cells.iter().find_map(|c| leading_level(c).filter(|(_, end)| *end == c.len()).map(|(l, _)| l))
            else {
                continue;
            };
            for cell in &cells {
                if let Some(p) = percent_cell(cell) {
                    row_credits[level.index()] = Some(p);
                } else {
                    r.add(level, intervals(cell));
                }
                if r.window_s.is_none() {
                    r.window_s = window_s(cell);
                }
            }
            continue;
        }
        if credits(line).is_some() {
            continue;
        }
        if let Some((level, end)) = leading_level(line) {
            r.add(level, intervals(&line[end..]));
        }
    }
    r.credit = credits(text).or_else(|| match row_credits {
        [n, Some(l1), Some(l2)] => Some(CreditPct { none: n.unwrap_or(0.0), l1, l2 }),
        _ => None,
    });
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparison_forms() {
        assert_eq!(intervals("P <= 30 kW"), vec![Interval::below(30.0, true)]);
        assert_eq!(intervals("30 < P ≤ 35 kW"), vec![Interval::bounded(30.0, false, 35.0, true)]);
        assert_eq!(intervals("P > 35"), vec![Interval::above(35.0, false)]);
        assert_eq!(
            intervals("27 < T <= 29 °C or 16 <= T < 18 °C"),
            vec![Interval::bounded(27.0, false, 29.0, true), Interval::bounded(16.0, true, 18.0, false)]
        );
        assert_eq!(intervals("above 35 kW"), vec![]);
    }

    #[test]
    fn windows() {
        assert_eq!(window_s("measured as a 5-min avg"), Some(300));
        assert_eq!(window_s("15-minute average"), Some(900));
        assert_eq!(window_s("averaged over 30 seconds"), Some(30));
        assert_eq!(window_s("every 5 minutes"), None);
    }

    #[test]
    fn credit_string() {
        let c = credits("SLA credit: None: 0%; L1: 5%; L2: 15%").unwrap();
        assert_eq!(c, CreditPct { none: 0.0, l1: 5.0, l2: 15.0 });
        assert_eq!(credit_text(&c), "None: 0%; L1: 5%; L2: 15%");
        assert_eq!(credits("L1: 5%"), None);
    }

    #[test]
    fn table_rows() {
        let text = "| Level | Threshold | Credit |\n| None | 18 <= T <= 27 °C | 0% |\n| Level 1 | 27 < T <= 29 or 16 <= T < 18 | 3% |\n| Level 2 | T < 16 or T > 29 | 10% |";
        let r = read(text);
        assert_eq!(r.credit, Some(CreditPct { none: 0.0, l1: 3.0, l2: 10.0 }));
        assert_eq!(r.bands.l2, vec![Interval::below(16.0, false), Interval::above(29.0, false)]);
        assert!(r.bands.partition_problems().is_empty());
    }

    #[test]
    fn metric_keywords() {
        assert_eq!(metric_in("rack draw in kW"), Some(Metric::PowerKw));
        assert_eq!(metric_in("Relative humidity %RH"), Some(Metric::HumidityRh));
        assert_eq!(metric_in("inlet 25 °C"), Some(Metric::TemperatureC));
        assert_eq!(metric_in("kWh billing"), None);
        assert_eq!(metric_in("power and temperature"), None);
        assert_eq!(metrics_in("power and temperature"), vec![Metric::PowerKw, Metric::TemperatureC]);
    }

    #[test]
    fn segments() {
        let text = "Credits. Power: None: 0%; L1: 5%; L2: 15% Temperature: None: 0%; L1: 1%; L2: 2%";
        let p = segment_for(Metric::PowerKw, text);
        assert_eq!(credits(&p), Some(CreditPct { none: 0.0, l1: 5.0, l2: 15.0 }));
        let t = segment_for(Metric::TemperatureC, text);
        assert_eq!(credits(&t), Some(CreditPct { none: 0.0, l1: 1.0, l2: 2.0 }));
        assert_eq!(segment_for(Metric::HumidityRh, "no keywords"), "no keywords");
    }
}
