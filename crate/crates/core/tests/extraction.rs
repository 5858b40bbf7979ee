use std::path::{Path, PathBuf};

use colosla_core::docio::{parse_document, pii_matches, scrub_pii, PiiConfig, RawDocument, SanitizedDocument};
use colosla_core::extraction::{
    extract_rules, plan_assignments, run_researcher, verify_rules, AgentState, CandidateRule, Confidence,
    DeterministicBackend, ExtractionConfig, ExtractionError, MissingField, ResearcherAssignment, ResearcherKind,
    Thresholds, VerdictStatus,
};
use colosla_core::rulesdb::{example_rules, validate_rule, Interval, RuleSet};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn sanitized(name: &str) -> SanitizedDocument {
    let raw = RawDocument::from_file(&fixture(name)).unwrap();
    let cfg = PiiConfig::load(&fixture("pii_customer_a.toml")).unwrap();
    scrub_pii(&parse_document(&raw).unwrap(), &cfg).unwrap().0
}

/// The fields the example rule table states: id, metric, window, bands, credits.
fn table_fields(rules: &RuleSet) -> Vec<String> {
    rules
        .iter()
        .map(|r| {
            format!(
                "{} {} {} {} {:?}",
                r.rule_id,
                r.metric,
                r.aggregation_window_s,
                serde_json::to_string(&r.bands).unwrap(),
                r.credit_pct
            )
        })
        .collect()
}

#[test]
fn fixture_yields_the_three_example_rules() {
    let doc = sanitized("sla_customer_a.md");
    assert_eq!(doc.customer_alias, "Customer_A");
    let out = extract_rules(&doc, &DeterministicBackend, &ExtractionConfig::default()).unwrap();
    assert_eq!(table_fields(&out.rules), table_fields(&example_rules()));
    for r in &out.rules {
        assert_eq!(validate_rule(r), Ok(()));
        assert_eq!(r.customer, "Customer_A");
    }
    assert!(out.open_questions.is_empty());
    assert!(out.iterations <= 5);
}

#[test]
fn sanitized_fixture_is_clean() {
    let doc = sanitized("sla_customer_a.md");
    let cfg = PiiConfig::load(&fixture("pii_customer_a.toml")).unwrap();
    assert!(pii_matches(&doc, &cfg).unwrap().is_empty());
    let text = serde_json::to_string(&doc).unwrap();
    for raw in ["CME", "Chicago-1", "Jane", "Robert Miles", "cmecorp", "555-0142", "LaSalle"] {
        assert!(!text.contains(raw), "{raw} survived scrubbing");
    }
    assert!(text.contains("30 < P <= 35 kW"));
}

#[test]
fn extraction_is_deterministic() {
    let doc = sanitized("sla_customer_a.md");
    let a = extract_rules(&doc, &DeterministicBackend, &ExtractionConfig::default()).unwrap();
    let b = extract_rules(&doc, &DeterministicBackend, &ExtractionConfig::default()).unwrap();
    assert_eq!(serde_json::to_vec(&a.rules).unwrap(), serde_json::to_vec(&b.rules).unwrap());
    assert_eq!(a.trace, b.trace);
}

#[test]
fn plan_routes_metric_sections() {
    let doc = sanitized("sla_customer_a.md");
    let state = AgentState::new(&doc, 10_000);
    let plan = plan_assignments(&doc, &state).unwrap();
    let kinds: Vec<ResearcherKind> = plan.iter().map(|a| a.researcher_kind).collect();
    assert_eq!(kinds, vec![ResearcherKind::Power, ResearcherKind::Temperature, ResearcherKind::Humidity]);
    for a in &plan {
        assert!(state.uncovered_sections.contains(&a.section));
        assert_eq!(a.excerpt, doc.section_text(a.section));
    }
    let covered = AgentState { uncovered_sections: Default::default(), ..state.clone() };
    assert!(plan_assignments(&doc, &covered).unwrap().is_empty());
    let broke = AgentState { token_budget_remaining: 0, ..state };
    assert!(matches!(plan_assignments(&doc, &broke), Err(ExtractionError::BudgetExhausted)));
}

#[test]
fn kw_section_routes_to_power() {
    assert_eq!(ResearcherKind::route("Draw above 30 kW over a 5-min window"), ResearcherKind::Power);
    assert_eq!(ResearcherKind::route("Billing terms"), ResearcherKind::Generic);
}

fn assignment(kind: ResearcherKind, excerpt: &str) -> ResearcherAssignment {
    ResearcherAssignment { researcher_kind: kind, excerpt: excerpt.into(), context_note: String::new(), section: 0 }
}

#[test]
fn researcher_on_power_clause() {
    let doc = sanitized("sla_customer_a.md");
    let (i, _) = doc.section_by_heading("2. Power SLA").unwrap();
    let a = assignment(ResearcherKind::Power, &doc.section_text(i));
    let out = run_researcher(&a, &doc, &DeterministicBackend, 4, 1).unwrap();
    assert_eq!(out.candidates.len(), 1);
    let c = &out.candidates[0];
    assert_eq!(c.metric, "power_kw");
    assert_eq!(c.confidence, Confidence::Complete);
    let bands = c.thresholds.bands().unwrap();
    assert_eq!(bands.l1, vec![Interval::bounded(30.0, false, 35.0, true)]);
    assert_eq!(bands.endpoints(), vec![30.0, 35.0]);
}

#[test]
fn researcher_edge_cases() {
    let doc = sanitized("sla_customer_a.md");
    let vague = assignment(ResearcherKind::Power, "Power shall be provided to each rack.");
    let out = run_researcher(&vague, &doc, &DeterministicBackend, 4, 1).unwrap();
    assert_eq!(out.candidates.len(), 1);
    assert_eq!(out.candidates[0].confidence, Confidence::Partial);
    let empty = assignment(ResearcherKind::Power, "  ");
    assert!(run_researcher(&empty, &doc, &DeterministicBackend, 4, 1).unwrap().candidates.is_empty());
}

#[test]
fn missing_credit_is_fetched_by_heading() {
    let body = "## Power\nRack draw, 5-min avg.\n- None: P <= 30 kW\n- L1: 30 < P <= 35 kW\n- L2: P > 35 kW\n\n## Service Credits\nPower: None: 0%; L1: 5%; L2: 15%\nTemperature: None: 0%; L1: 1%; L2: 2%\n";
    let raw = RawDocument { doc_id: "d".into(), source_format: colosla_core::docio::SourceFormat::Markdown, body: body.into() };
    let doc = scrub_pii(&parse_document(&raw).unwrap(), &PiiConfig::default()).unwrap().0;
    let doc = SanitizedDocument { customer_alias: "Customer_B".into(), ..doc };
    let cfg = ExtractionConfig { expected_metrics: vec![], ..ExtractionConfig::default() };
    let out = extract_rules(&doc, &DeterministicBackend, &cfg).unwrap();
    let r = out.rules.get("CUST_B_PWR_01").unwrap();
    assert_eq!((r.credit_pct.l1, r.credit_pct.l2), (5.0, 15.0));
    assert!(out.trace.iter().any(|t| t.action.contains("request snippet \"Service Credits\"")));
}

fn complete(metric: &str) -> CandidateRule {
    let doc = sanitized("sla_customer_a.md");
    let out = extract_rules(&doc, &DeterministicBackend, &ExtractionConfig::default()).unwrap();
    let v = out.verdict.unwrap();
    v.merged.into_iter().find(|c| c.metric == metric).unwrap()
}

#[test]
fn verification_rules() {
    let all: Vec<CandidateRule> = ["power_kw", "temperature_c", "humidity_rh"].into_iter().map(complete).collect();
    assert_eq!(verify_rules(&all, None).status, VerdictStatus::Complete);

    let mut no_impact = complete("power_kw");
    no_impact.violation_impact.clear();
    no_impact.credit_pct = None;
    let v = verify_rules(&[no_impact], None);
    assert_eq!(v.status, VerdictStatus::Incomplete);
    assert_eq!(v.missing_items, vec![(0, MissingField::ViolationImpact)]);

    let p = complete("power_kw");
    let v = verify_rules(&[p.clone(), p], None);
    assert_eq!(v.merged.len(), 1);
    assert_eq!(v.status, VerdictStatus::Complete);

    let mut other = complete("power_kw");
    other.thresholds = Thresholds::Bands(example_rules().get("CUST_A_TEMP_01").unwrap().bands.clone());
    let v = verify_rules(&[complete("power_kw"), other], None);
    assert_eq!(v.status, VerdictStatus::Incomplete);
    assert_eq!(v.conflicts.len(), 1);
}

#[test]
fn humidity_ablation() {
    let doc = sanitized("sla_customer_a_no_humidity.md");
    let Err(ExtractionError::Incomplete(out)) = extract_rules(&doc, &DeterministicBackend, &ExtractionConfig::default())
    else {
        panic!("expected an incomplete extraction");
    };
    assert_eq!(out.rules.ids(), vec!["CUST_A_PWR_01", "CUST_A_TEMP_01"]);
    assert_eq!(out.open_questions.len(), 1);
    assert!(out.open_questions[0].contains("humidity"));
}

#[test]
fn no_metric_clauses() {
    let raw = RawDocument {
        doc_id: "plain".into(),
        source_format: colosla_core::docio::SourceFormat::PlainText,
        body: "GENERAL TERMS\nThe parties agree to cooperate in good faith.\n".into(),
    };
    let doc = scrub_pii(&parse_document(&raw).unwrap(), &PiiConfig::default()).unwrap().0;
    let Err(ExtractionError::Incomplete(out)) = extract_rules(&doc, &DeterministicBackend, &ExtractionConfig::default())
    else {
        panic!("expected an incomplete extraction");
    };
    assert!(out.rules.is_empty());
}

mod remote {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    use colosla_core::extraction::{
        ReasoningBackend, RemoteBackend, RemoteConfig, ResearcherKind, StepRequest,
    };

    use super::*;

    /// Serve one canned HTTP response; send back the request head and body.
    fn serve_once(status: &str, body: String) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        let status = status.to_string();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
                head.push_str(&line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send((head, String::from_utf8(buf).unwrap())).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        });
        (url, rx)
    }

    fn request() -> StepRequest {
        StepRequest {
            researcher_kind: ResearcherKind::Power,
            excerpt: "- None: P <= 30 kW".into(),
            context_note: "power".into(),
            headings: vec![],
            snippets: vec![],
            cycle: 0,
        }
    }

    #[test]
    fn chat_completion_round_trip() {
        let reply = serde_json::json!({
            "thought": "found bands",
            "candidates": [{
                "metric": "power_kw",
                "thresholds": {"form": "bands", "value": {"none": ["(-inf, 30]"], "l1": ["(30, 35]"], "l2": ["(35, +inf)"]}},
                "aggregation_window_s": 300,
                "sla_tier": "none/l1/l2",
                "violation_impact": "None: 0%; L1: 5%; L2: 15%",
                "credit_pct": {"none": 0.0, "l1": 5.0, "l2": 15.0},
                "comment_text": "",
                "confidence": "complete"
            }],
            "done": true
        });
        let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": reply.to_string()}}]});
        let (url, rx) = serve_once("200 OK", body.to_string());
        let backend = RemoteBackend::new(RemoteConfig {
            endpoint: url,
            api_key: Some("secret-key".into()),
            model: "m1".into(),
            timeout_s: 10,
        })
        .unwrap();
        let out = backend.step(&request()).unwrap();
        assert!(out.done);
        assert_eq!(out.candidates[0].metric, "power_kw");
        assert_eq!(out.candidates[0].missing_fields(), vec![]);
        let (head, sent) = rx.recv().unwrap();
        assert!(head.to_ascii_lowercase().contains("authorization: bearer secret-key"));
        let sent: serde_json::Value = serde_json::from_str(&sent).unwrap();
        assert_eq!(sent["model"], "m1");
        assert!(sent["messages"][1]["content"].as_str().unwrap().contains("P <= 30 kW"));
    }

    #[test]
    fn http_error_is_unavailable() {
        let (url, _rx) = serve_once("503 Service Unavailable", "{}".into());
        let backend =
            RemoteBackend::new(RemoteConfig { endpoint: url, api_key: None, model: "m".into(), timeout_s: 10 }).unwrap();
        assert!(matches!(backend.step(&request()), Err(ExtractionError::BackendUnavailable(_))));
    }

    #[test]
    fn closed_port_is_unavailable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let backend = RemoteBackend::new(RemoteConfig {
            endpoint: format!("http://127.0.0.1:{port}/"),
            api_key: None,
            model: "m".into(),
            timeout_s: 2,
        })
        .unwrap();
        let doc = sanitized("sla_customer_a.md");
        let err = extract_rules(&doc, &backend, &ExtractionConfig::default()).unwrap_err();
        assert!(matches!(err, ExtractionError::BackendUnavailable(_)), "{err}");
    }
}

mod termination {
    use std::sync::atomic::{AtomicU64, Ordering};

    use colosla_core::extraction::{ReasoningBackend, StepReply, StepRequest};
    use proptest::prelude::*;

    use super::*;

    /// Pseudo-random replies: snippet requests, never-finishing loops,
    /// conflicting and malformed candidates.
    struct Chaos {
        state: AtomicU64,
    }

    impl Chaos {
        fn next(&self) -> u64 {
            let mut x = self.state.fetch_add(0x9E37_79B9_7F4A_7C15, Ordering::SeqCst);
            x ^= x >> 31;
            x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            x ^ (x >> 29)
        }
    }

    impl ReasoningBackend for Chaos {
        fn name(&self) -> &str {
            "chaos"
        }

        fn step(&self, req: &StepRequest) -> Result<StepReply, ExtractionError> {
            let r = self.next();
            let metric = ["power_kw", "temperature_c", "humidity_rh", "", "bogus"][(r % 5) as usize];
            let lo = (r >> 8) % 50;
            let bands = format!(
                r#"{{"none":["(-inf, {lo}]"],"l1":["({lo}, {})"],"l2":["[{}, +inf)"]}}"#,
                lo + 5,
                lo + 5 + (r >> 20) % 2
            );
            let candidate = CandidateRule {
                metric: metric.into(),
                thresholds: Thresholds::Bands(serde_json::from_str(&bands).unwrap()),
                aggregation_window_s: ((r >> 30) % 3 != 0).then_some(300),
                sla_tier: String::new(),
                violation_impact: if (r >> 33) % 2 == 0 { "x".into() } else { String::new() },
                credit_pct: None,
                comment_text: String::new(),
                confidence: if (r >> 35) % 2 == 0 { Confidence::Complete } else { Confidence::Partial },
                source_section: None,
            };
            Ok(StepReply {
                thought: "?".into(),
                candidates: vec![candidate; ((r >> 40) % 3) as usize],
                request_snippet: req.headings.get(((r >> 44) as usize) % req.headings.len().max(1)).cloned(),
                done: (r >> 50) % 4 == 0,
            })
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loop_halts_within_iteration_cap(seed in any::<u64>(), max_iterations in 1usize..7, budget in 1i64..20_000) {
            let doc = sanitized("sla_customer_a.md");
            let cfg = ExtractionConfig { max_iterations, char_budget: budget, ..ExtractionConfig::default() };
            let out = match extract_rules(&doc, &Chaos { state: AtomicU64::new(seed) }, &cfg) {
                Ok(o) => o,
                Err(ExtractionError::Incomplete(o)) => *o,
                Err(e) => panic!("{e}"),
            };
            prop_assert!(out.iterations <= max_iterations);
            for r in &out.rules {
                prop_assert_eq!(validate_rule(r), Ok(()));
            }
        }
    }
}
