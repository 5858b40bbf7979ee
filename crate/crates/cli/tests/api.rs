use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use colosla_cli::config::ServiceConfig;
use colosla_cli::service::{router, AppState};
use colosla_core::rulesdb::{example_rules, Interval, Metric, ViolationLevel};
use colosla_core::stream::Contract;
use colosla_core::telemetry::{simulate, BandSide, Episode, SimConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn service(dir: &Path, token: Option<&str>) -> (Arc<AppState>, Router) {
    let cfg = ServiceConfig {
        data_dir: dir.to_path_buf(),
        api_token: token.map(String::from),
        pii_config: Some(fixture("pii_customer_a.toml")),
        seed_rules: Some(fixture("rules_customer_a.jsonl")),
        contracts: vec![Contract { customer: "Customer_A".into(), mrc_usd: 100_000.0, billing_period: "2025-01".into() }],
        ..ServiceConfig::default()
    };
    let state = AppState::open(cfg).unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_with(app, method, uri, body, &[]).await
}

async fn call_with(app: &Router, method: &str, uri: &str, body: Option<Value>, headers: &[(&str, &str)]) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_job(app: &Router, id: &str) -> Value {
    for _ in 0..3000 {
        let (_, rec) = call(app, "GET", &format!("/jobs/{id}"), None).await;
        if rec["status"] == "done" || rec["status"] == "failed" {
            return rec;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn rules_listing_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = service(dir.path(), None);
    let (status, rules) = call(&app, "GET", "/rules?customer=Customer_A", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rules.as_array().unwrap().len(), 3);

    let mut bad = serde_json::to_value(example_rules().get("CUST_A_PWR_01").unwrap()).unwrap();
    bad["bands"]["l1"] = json!(["[29, 35]"]);
    let (status, body) = call(&app, "PUT", "/rules/CUST_A_PWR_01", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!body["detail"].as_array().unwrap().is_empty(), "{body}");

    let (status, _) = call(&app, "PUT", "/rules/OTHER", Some(serde_json::to_value(example_rules().get("CUST_A_PWR_01").unwrap()).unwrap())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "GET", "/rules/NOPE", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn rule_edit_creates_version_and_relabel_job() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = service(dir.path(), None);
    let (status, sim) = call(&app, "POST", "/jobs/simulate", Some(json!({"seed": 3, "racks": 1, "days": 0.5, "slot_hours": 4}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let sim = wait_job(&app, sim["job_id"].as_str().unwrap()).await;
    assert_eq!(sim["status"], "done", "{sim}");
    let csv = sim["outputs"][0].as_str().unwrap();
    let digest = Path::new(csv).file_stem().unwrap().to_str().unwrap().to_string();
    let (_, label) = call(&app, "POST", "/jobs/label", Some(json!({"telemetry": digest}))).await;
    let label = wait_job(&app, label["job_id"].as_str().unwrap()).await;
    assert_eq!(label["status"], "done", "{label}");

    let mut rule = example_rules().get("CUST_A_PWR_01").unwrap().clone();
    rule.bands.none = vec![Interval::below(25.0, true)];
    rule.bands.l1 = vec![Interval::bounded(25.0, false, 35.0, true)];
    let (status, body) = call(&app, "PUT", "/rules/CUST_A_PWR_01", Some(serde_json::to_value(&rule).unwrap())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["version"], 2);
    let job = body["relabel_job"]["job_id"].as_str().expect("relabel job").to_string();
    let done = wait_job(&app, &job).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["kind"], "relabel");

    let (_, latest) = call(&app, "GET", "/rules/CUST_A_PWR_01", None).await;
    assert_eq!(latest["versions"], json!([1, 2]));
    let (_, v1) = call(&app, "GET", "/rules/CUST_A_PWR_01?version=1", None).await;
    assert_eq!(v1["rule"]["bands"]["none"], json!(["(-inf, 30]"]));
}

fn l1_power_points() -> Vec<colosla_core::telemetry::TelemetryPoint> {
    let sim = SimConfig {
        duration_s: 6 * 3600,
        episodes: vec![Episode {
            channel: Metric::PowerKw,
            rack: 0,
            start_s: 3600,
            length_s: 4 * 3600,
            band: ViolationLevel::L1,
            side: BandSide::Upper,
        }],
        ..SimConfig::default()
    };
    simulate(&sim, &example_rules()).unwrap()
}

#[tokio::test]
async fn telemetry_to_views() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = service(dir.path(), None);
    let points = l1_power_points();
    let (status, summary) = call(&app, "POST", "/telemetry", Some(serde_json::to_value(&points).unwrap())).await;
    assert_eq!(status, StatusCode::OK, "{summary}");
    let n = summary["Customer_A"]["events"].as_u64().unwrap();
    assert!(n > 0);

    let (_, fin) = call(&app, "GET", "/views/finance", None).await;
    let rows = fin["rows"].as_array().unwrap();
    assert_eq!(rows.len() as u64, n);
    let l1 = rows.iter().find(|r| r["rule_id"] == "CUST_A_PWR_01" && r["level"] == "l1").expect("an L1 power row");
    assert_eq!(l1["credit_pct"], 5.0);
    assert_eq!(l1["expected_credit_usd"], 5000.0);

    let t = rows[rows.len() / 2]["window_end"].as_i64().unwrap();
    let (_, later) = call(&app, "GET", &format!("/views/finance?since={t}"), None).await;
    let later = later["rows"].as_array().unwrap();
    assert!(!later.is_empty() && later.len() < rows.len());
    assert!(later.iter().all(|r| r["window_end"].as_i64().unwrap() > t));

    let (_, ops) = call(&app, "GET", "/views/ops", None).await;
    let high = ops["rows"].as_array().unwrap().iter().find(|r| r["risk_level"] == "high").expect("a high-risk row");
    assert!(high["recommended_actions"].as_array().unwrap().contains(&json!("Check Rack R1 PDUs")));

    let (_, comp) = call(&app, "GET", "/views/compliance", None).await;
    assert_eq!(comp["chains"]["Customer_A"]["verified_records"].as_u64().unwrap(), n);
    assert_eq!(comp["chains"]["Customer_A"]["status"]["status"], "ok", "{}", comp["chains"]);

    let (status, _) = call(&app, "GET", "/views/bogus", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let audit = std::fs::read_to_string(dir.path().join("audit/Customer_A.jsonl")).unwrap();
    assert_eq!(audit.lines().count() as u64, n);

    // a restarted service resumes the stored chain
    let (state, app) = service(dir.path(), None);
    assert_eq!(state.events().len() as u64, n);
    let (_, comp) = call(&app, "GET", "/views/compliance", None).await;
    assert_eq!(comp["chains"]["Customer_A"]["verified_records"].as_u64().unwrap(), n);
}

#[tokio::test]
async fn document_upload_and_extraction() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = service(dir.path(), None);
    let text = std::fs::read_to_string(fixture("sla_customer_a.md")).unwrap();
    let (status, doc) = call(&app, "POST", "/documents", Some(json!({"name": "contract.md", "text": text}))).await;
    assert_eq!(status, StatusCode::CREATED, "{doc}");
    assert_eq!(doc["customer_alias"], "Customer_A");
    let (_, stored) = call(&app, "GET", "/documents/contract", None).await;
    assert!(!stored.to_string().contains("CME"));

    let (status, x) = call(&app, "POST", "/rules/extract", Some(json!({"doc_id": "contract"}))).await;
    assert_eq!(status, StatusCode::OK, "{x}");
    assert_eq!(x["rules"]["rules"].as_array().unwrap().len(), 3);
    assert_eq!(x["open_questions"], json!([]));

    let partial = std::fs::read_to_string(fixture("sla_customer_a_no_humidity.md")).unwrap();
    call(&app, "POST", "/documents", Some(json!({"name": "partial.md", "text": partial}))).await;
    let (status, x) = call(&app, "POST", "/rules/extract", Some(json!({"doc_id": "partial"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(x["detail"]["open_questions"][0].as_str().unwrap().contains("humidity"));

    let (status, _) = call(&app, "POST", "/rules/extract", Some(json!({"doc_id": "../etc"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn token_and_idempotency() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = service(dir.path(), Some("s3cret"));
    let (status, _) = call(&app, "GET", "/rules", None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let auth = [("authorization", "Bearer s3cret"), ("idempotency-key", "abc")];
    let body = json!({"seed": 1, "racks": 1, "days": 0.25});
    let (s1, a) = call_with(&app, "POST", "/jobs/simulate", Some(body.clone()), &auth).await;
    let (s2, b) = call_with(&app, "POST", "/jobs/simulate", Some(body.clone()), &auth).await;
    assert_eq!((s1, s2), (StatusCode::ACCEPTED, StatusCode::ACCEPTED));
    assert_eq!(a["job_id"], b["job_id"]);
    let (_, c) = call_with(&app, "POST", "/jobs/simulate", Some(body), &auth[..1]).await;
    assert_ne!(a["job_id"], c["job_id"]);
    let (status, _) = call_with(&app, "POST", "/jobs/bogus", None, &auth[..1]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn event_stream_replays_then_follows() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = service(dir.path(), None);
    let points = l1_power_points();
    state.ingest(&points).unwrap();
    let req = Request::builder().uri("/events/stream?since=0&customer=Customer_A").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();
    let frame = body.frame().await.unwrap().unwrap().into_data().unwrap();
    let text = String::from_utf8(frame.to_vec()).unwrap();
    assert!(text.starts_with("event: prediction"), "{text}");
    let data = text.lines().find_map(|l| l.strip_prefix("data: ")).unwrap();
    let v: Value = serde_json::from_str(data).unwrap();
    assert_eq!(v["event"]["customer"], "Customer_A");
    assert!(v["audit"]["chain_digest"].is_string());
}

#[tokio::test]
async fn train_job_swaps_in_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = service(dir.path(), None);
    let cfg = json!({"simulation": {"seed": 5, "racks": 1, "days": 1.0, "slot_hours": 6.0}, "train": {"epochs": 1}});
    let (_, job) = call(&app, "POST", "/jobs/train", Some(json!({"config": cfg}))).await;
    let done = wait_job(&app, job["job_id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "done", "{done}");
    assert!(dir.path().join("models/Customer_A.ckpt").exists());
    state.ingest(&l1_power_points()).unwrap();
    let events = state.events();
    assert!(!events.is_empty());
    assert!(events.iter().all(|p| p.event.model_version != "stub-persistence"), "{}", events[0].event.model_version);
}
