//! HTTP facade: documents, rules, telemetry, jobs, live events and views.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use colosla_core::docio::{PiiConfig, RawDocument, SanitizedDocument, SourceFormat};
use colosla_core::labeler::{relabel, LabeledDataset, TelemetryArchive};
use colosla_core::model::{head_order, load_checkpoint, Predictor};
use colosla_core::rulesdb::{validate_rule, RuleSet, RuleSpec, RulesStore};
use colosla_core::stream::{
    to_finance, to_ops, verify_chain, AuditChain, AuditRecord, ChainStatus, Contract, FinanceView, OpsView,
    Playbook, PredictionEvent, StreamEngine,
};
use colosla_core::telemetry::TelemetryPoint;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::config::ServiceConfig;
use crate::error::CliError;
use crate::jobs::{JobKind, JobOutput, JobQueue, JobRecord};
use crate::pipeline::{self, BackendChoice, SimParams, TrainFile};

/// One event with its three stakeholder projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Published {
    pub event: PredictionEvent,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finance: Option<FinanceView>,
    pub ops: OpsView,
    pub audit: AuditRecord,
}

pub struct AppState {
    pub config: ServiceConfig,
    pii: PiiConfig,
    store: RwLock<RulesStore>,
    engines: Mutex<BTreeMap<String, StreamEngine>>,
    log: RwLock<Vec<Published>>,
    events: broadcast::Sender<Published>,
    jobs: JobQueue,
    /// Latest labeled dataset per customer, for relabel-on-edit.
    datasets: Mutex<BTreeMap<String, PathBuf>>,
    idempotent: Mutex<HashMap<String, (StatusCode, Bytes)>>,
}

impl AppState {
    pub fn open(config: ServiceConfig) -> Result<Arc<AppState>, CliError> {
        let dir = &config.data_dir;
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let pii = match &config.pii_config {
            Some(p) => PiiConfig::load(p)?,
            None => PiiConfig::default(),
        };
        let mut store = RulesStore::open(dir.join("rules.jsonl"))?;
        if let Some(seed) = &config.seed_rules {
            if store.customers().is_empty() {
                store.load(&pipeline::load_rules(Some(seed))?)?;
            }
        }
        let mut log = Vec::new();
        let audit_dir = dir.join("audit");
        if audit_dir.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&audit_dir)
                .map_err(CliError::io(&audit_dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            for f in files {
                for line in pipeline::read_text(&f)?.lines().filter(|l| !l.trim().is_empty()) {
                    let audit: AuditRecord = serde_json::from_str(line)?;
                    log.push(Self::project(&config, &store, audit));
                }
            }
        }
        let (events, _) = broadcast::channel(1024);
        let jobs = JobQueue::new(config.job_workers, Some(dir.join("jobs")));
        Ok(Arc::new(AppState {
            pii,
            store: RwLock::new(store),
            engines: Mutex::default(),
            log: RwLock::new(log),
            events,
            jobs,
            datasets: Mutex::default(),
            idempotent: Mutex::default(),
            config,
        }))
    }

    fn contracts(config: &ServiceConfig) -> BTreeMap<String, Contract> {
        config.contracts.iter().map(|c| (c.customer.clone(), c.clone())).collect()
    }

    fn project(config: &ServiceConfig, store: &RulesStore, audit: AuditRecord) -> Published {
        let event = audit.event.clone();
        let finance = to_finance(&event, &Self::contracts(config), store).ok();
        let playbook = Playbook::defaults_for(&store.get_rules(&event.customer));
        let ops = to_ops(&event, &playbook, &config.risk);
        Published { event, finance, ops, audit }
    }

    fn audit_path(&self, customer: &str) -> PathBuf {
        self.config.data_dir.join("audit").join(format!("{customer}.jsonl"))
    }

    fn model_path(&self, customer: &str) -> PathBuf {
        self.config.data_dir.join("models").join(format!("{customer}.ckpt"))
    }

    fn documents_dir(&self) -> PathBuf {
        self.config.data_dir.join("documents")
    }

    fn archive(&self) -> TelemetryArchive {
        TelemetryArchive::new(self.config.data_dir.join("telemetry"))
    }

    fn rules_for(&self, customer: &str) -> RuleSet {
        self.store.read().unwrap().get_rules(customer)
    }

    /// The trained checkpoint when it covers the active rules, else the stub.
    fn predictor_for(&self, customer: &str, rules: &RuleSet) -> Result<Arc<dyn Predictor>, CliError> {
        let path = self.model_path(customer);
        if path.exists() {
            match load_checkpoint(&path) {
                Ok(m) if m.config.rule_heads == head_order(rules, customer) => return Ok(Arc::new(m)),
                Ok(_) => tracing::warn!(customer, "checkpoint heads differ from active rules; using stub"),
                Err(e) => tracing::warn!(customer, error = %e, "unreadable checkpoint; using stub"),
            }
        }
        pipeline::predictor("stub", rules, customer, &self.config.stream)
    }

    fn new_engine(&self, customer: &str) -> Result<StreamEngine, CliError> {
        let rules = self.rules_for(customer);
        if rules.is_empty() {
            return Err(CliError::Invalid(format!("no rules for customer {customer}")));
        }
        let predictor = self.predictor_for(customer, &rules)?;
        let chain = {
            let log = self.log.read().unwrap();
            let own: Vec<AuditRecord> = log.iter().filter(|p| p.event.customer == customer).map(|p| p.audit.clone()).collect();
            AuditChain::resume(&own)
        };
        Ok(StreamEngine::new(customer, predictor, &rules, self.config.stream)?.with_chain(chain))
    }

    /// Feed points to the customers' engines and publish the events.
    pub fn ingest(&self, points: &[TelemetryPoint]) -> Result<Value, CliError> {
        let mut by_customer: BTreeMap<String, Vec<TelemetryPoint>> = BTreeMap::new();
        for p in points {
            by_customer.entry(p.customer.clone()).or_default().push(p.clone());
        }
        let mut engines = self.engines.lock().unwrap();
        let mut summary = BTreeMap::new();
        for (customer, pts) in by_customer {
            if !engines.contains_key(&customer) {
                let engine = self.new_engine(&customer)?;
                engines.insert(customer.clone(), engine);
            }
            let engine = engines.get_mut(&customer).expect("inserted");
            let out = engine.step(&pts)?;
            let n = out.events.len();
            self.publish(&customer, out.audit)?;
            summary.insert(customer, json!({"points": pts.len(), "events": n, "stats": engine.stats()}));
        }
        Ok(json!(summary))
    }

    fn publish(&self, customer: &str, audit: Vec<AuditRecord>) -> Result<(), CliError> {
        let lines: Vec<String> = audit.iter().map(AuditRecord::to_line).collect();
        pipeline::append_lines(&self.audit_path(customer), &lines)?;
        let published: Vec<Published> = {
            let store = self.store.read().unwrap();
            audit.into_iter().map(|a| Self::project(&self.config, &store, a)).collect()
        };
        let mut log = self.log.write().unwrap();
        for p in published {
            let _ = self.events.send(p.clone());
            log.push(p);
        }
        Ok(())
    }

    /// Close every engine's open bins and persist what they emit.
    pub fn flush(&self) -> Result<(), CliError> {
        let mut engines = self.engines.lock().unwrap();
        for (customer, engine) in engines.iter_mut() {
            let out = engine.flush()?;
            self.publish(customer, out.audit)?;
        }
        Ok(())
    }

    /// Make later events use `rules`, and drop the engine's cached predictor
    /// if its heads no longer match.
    fn rules_changed(&self, customer: &str) {
        let rules = self.rules_for(customer);
        let mut engines = self.engines.lock().unwrap();
        if let Some(engine) = engines.get_mut(customer) {
            if engine.set_rules(&rules).is_err() {
                engines.remove(customer);
            }
        }
    }

    pub fn jobs(&self) -> &JobQueue {
        &self.jobs
    }

    pub fn events(&self) -> Vec<Published> {
        self.log.read().unwrap().clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), detail: None }
    }

    fn with(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let status = match &e {
            CliError::Invalid(_) | CliError::Doc(_) | CliError::Incomplete(_) => StatusCode::UNPROCESSABLE_ENTITY,
            CliError::Store(colosla_core::rulesdb::StoreError::ValidationFailed { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            CliError::Stream(_) => StatusCode::UNPROCESSABLE_ENTITY,
            CliError::Extraction(colosla_core::extraction::ExtractionError::BackendUnavailable(_)) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.one_line())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.message});
        if let Some(d) = self.detail {
            body["detail"] = d;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, CliError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/documents", post(post_document))
        .route("/documents/{id}", get(get_document))
        .route("/rules/extract", post(post_extract))
        .route("/rules", get(get_rules))
        .route("/rules/{id}", put(put_rule).get(get_rule))
        .route("/telemetry", post(post_telemetry))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{kind_or_id}", post(post_job).get(get_job))
        .route("/events/stream", get(event_stream))
        .route("/views/{view}", get(get_view))
        .layer(middleware::from_fn_with_state(state.clone(), idempotency))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .with_state(state)
}

async fn auth(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.api_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

/// Replays the stored response for a repeated `Idempotency-Key`.
async fn idempotency(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let key = match (req.method(), req.headers().get("idempotency-key").and_then(|v| v.to_str().ok())) {
        (&Method::POST | &Method::PUT, Some(k)) => format!("{} {} {k}", req.method(), req.uri().path()),
        _ => return next.run(req).await,
    };
    if let Some((status, body)) = state.idempotent.lock().unwrap().get(&key).cloned() {
        return (status, [(header::CONTENT_TYPE, "application/json")], body).into_response();
    }
    let resp = next.run(req).await;
    let (parts, body) = resp.into_parts();
    let bytes = match axum::body::to_bytes(body, usize::MAX).await {
        Ok(b) => b,
        Err(e) => return ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    };
    if parts.status.is_success() {
        state.idempotent.lock().unwrap().insert(key, (parts.status, bytes.clone()));
    }
    Response::from_parts(parts, Body::from(bytes))
}

#[derive(Debug, Deserialize)]
struct NewDocument {
    /// File name; the extension picks the parser.
    name: String,
    text: String,
}

async fn post_document(State(state): State<Arc<AppState>>, Json(req): Json<NewDocument>) -> ApiResult<(StatusCode, Json<Value>)> {
    let path = Path::new(&req.name);
    let doc_id = path.file_stem().and_then(|s| s.to_str()).filter(|s| !s.is_empty()).unwrap_or("document").to_string();
    if !doc_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "document name must be a plain file name"));
    }
    let raw = RawDocument { doc_id, source_format: SourceFormat::from_path(path), body: req.text.replace("\r\n", "\n") };
    let st = state.clone();
    let doc = blocking(move || Ok(pipeline::ingest(&raw, &st.pii, &st.documents_dir())?.0)).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "doc_id": doc.doc_id,
            "customer_alias": doc.customer_alias,
            "sections": doc.sections.iter().map(|s| &s.heading).collect::<Vec<_>>(),
            "tables": doc.tables.len(),
            "redaction_count": doc.redaction_count,
        })),
    ))
}

fn load_document(state: &AppState, id: &str) -> Result<SanitizedDocument, ApiError> {
    if !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no document {id}")));
    }
    let path = state.documents_dir().join(format!("{id}.json"));
    if !path.exists() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no document {id}")));
    }
    SanitizedDocument::read(&path).map_err(|e| CliError::from(e).into())
}

async fn get_document(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SanitizedDocument>> {
    Ok(Json(load_document(&state, &id)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtractRequest {
    doc_id: String,
    #[serde(default)]
    backend: BackendChoice,
    /// Write the rules to the store when extraction completes.
    #[serde(default = "yes")]
    store: bool,
}

fn yes() -> bool {
    true
}

/// Extract and optionally store; returns (complete, body).
fn run_extract(state: &AppState, req: &ExtractRequest) -> Result<(bool, Value), CliError> {
    let doc = SanitizedDocument::read(&state.documents_dir().join(format!("{}.json", req.doc_id)))?;
    let result = pipeline::extract(&doc, req.backend)?;
    let complete = result.is_ok();
    let x = match result {
        Ok(x) | Err(x) => x,
    };
    let mut versions = BTreeMap::new();
    if complete && req.store {
        let mut store = state.store.write().unwrap();
        for r in &x.rules {
            versions.insert(r.rule_id.clone(), store.upsert(r.clone())?);
        }
    }
    if complete && req.store {
        state.rules_changed(&doc.customer_alias);
    }
    Ok((
        complete,
        json!({
            "rules": x.rules,
            "open_questions": x.open_questions,
            "iterations": x.iterations,
            "budget_remaining": x.budget_remaining,
            "stored_versions": versions,
        }),
    ))
}

async fn post_extract(State(state): State<Arc<AppState>>, Json(req): Json<ExtractRequest>) -> ApiResult<Json<Value>> {
    load_document(&state, &req.doc_id)?;
    let st = state.clone();
    let (complete, body) = blocking(move || run_extract(&st, &req)).await?;
    if complete {
        Ok(Json(body))
    } else {
        Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "extraction incomplete").with(body))
    }
}

#[derive(Debug, Deserialize)]
struct RulesQuery {
    customer: Option<String>,
}

async fn get_rules(State(state): State<Arc<AppState>>, Query(q): Query<RulesQuery>) -> Json<Vec<RuleSpec>> {
    let store = state.store.read().unwrap();
    let customers = match q.customer {
        Some(c) => vec![c],
        None => store.customers(),
    };
    Json(customers.iter().flat_map(|c| store.get_rules(c).iter().cloned().collect::<Vec<_>>()).collect())
}

#[derive(Debug, Deserialize)]
struct RuleQuery {
    version: Option<u32>,
}

async fn get_rule(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RuleQuery>,
) -> ApiResult<Json<Value>> {
    let store = state.store.read().unwrap();
    let rule = match q.version {
        Some(v) => store.get(&id, v),
        None => store.latest(&id),
    };
    let rule = rule.ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no rule {id}")))?;
    Ok(Json(json!({"rule": rule, "versions": store.history(&id).iter().map(|r| r.version).collect::<Vec<_>>()})))
}

async fn put_rule(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<Value>,
) -> ApiResult<Json<Value>> {
    let mut rule: RuleSpec = serde_json::from_value(body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("rule does not parse: {e}")))?;
    if rule.rule_id != id {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("body rule_id {} does not match path {id}", rule.rule_id)));
    }
    if let Err(violations) = validate_rule(&rule) {
        let detail: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "rule failed validation").with(json!(detail)));
    }
    rule.updated_at = String::new();
    let version = state.store.write().unwrap().upsert(rule.clone()).map_err(CliError::from)?;
    state.rules_changed(&rule.customer);
    let dataset = state.datasets.lock().unwrap().get(&rule.customer).cloned();
    let relabel_job = dataset.map(|ds| submit_relabel(&state, &rule.customer, ds));
    let stored = state.store.read().unwrap().get(&id, version).cloned();
    Ok(Json(json!({"rule": stored, "version": version, "relabel_job": relabel_job})))
}

async fn post_telemetry(State(state): State<Arc<AppState>>, Json(points): Json<Vec<TelemetryPoint>>) -> ApiResult<Json<Value>> {
    let st = state.clone();
    Ok(Json(blocking(move || st.ingest(&points)).await?))
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> Json<Vec<JobRecord>> {
    Json(state.jobs.list())
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobRecord>> {
    state.jobs.get(&id).map(Json).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no job {id}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelParams {
    /// Telemetry digest in the archive.
    telemetry: String,
    #[serde(default = "default_customer")]
    customer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RelabelParams {
    #[serde(default = "default_customer")]
    customer: String,
    /// Defaults to the customer's latest dataset.
    dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainParams {
    #[serde(default = "default_customer")]
    customer: String,
    dataset: Option<PathBuf>,
    #[serde(default)]
    config: TrainFile,
}

fn default_customer() -> String {
    "Customer_A".into()
}

fn rel(state: &AppState, p: &Path) -> PathBuf {
    p.strip_prefix(&state.config.data_dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn dataset_path(state: &AppState, customer: &str, digest: &str) -> PathBuf {
    state.config.data_dir.join("datasets").join(format!("{customer}-{}.jsonl", &digest[..16.min(digest.len())]))
}

fn submit_relabel(state: &Arc<AppState>, customer: &str, dataset: PathBuf) -> JobRecord {
    let params = RelabelParams { customer: customer.to_string(), dataset: Some(dataset) };
    let value = serde_json::to_value(&params).unwrap_or_default();
    let st = state.clone();
    state.jobs.submit(JobKind::Relabel, &value, move || run_relabel(&st, &params).map_err(|e| e.one_line()))
}

fn run_relabel(state: &AppState, p: &RelabelParams) -> Result<JobOutput, CliError> {
    let path = match &p.dataset {
        Some(d) => d.clone(),
        None => state.datasets.lock().unwrap().get(&p.customer).cloned().ok_or_else(|| CliError::Invalid(format!("no dataset for {}", p.customer)))?,
    };
    let path = if path.is_absolute() { path } else { state.config.data_dir.join(path) };
    let ds = LabeledDataset::read(&path)?;
    let rules = state.rules_for(&p.customer);
    let (new, report) = relabel(&ds, &rules, &state.archive())?;
    let out = dataset_path(state, &p.customer, &new.digest());
    new.write(&out)?;
    state.datasets.lock().unwrap().insert(p.customer.clone(), out.clone());
    Ok(JobOutput { outputs: vec![rel(state, &out)], log: vec![format!("relabeled {} windows, changed {:?}", new.len(), report.changed)] })
}

fn run_job(state: &AppState, kind: JobKind, params: Value) -> Result<JobOutput, CliError> {
    match kind {
        JobKind::Simulate => {
            let p: SimParams = serde_json::from_value(params)?;
            let points = p.run(&state.rules_for(&p.customer))?;
            let digest = state.archive().store(&points)?;
            let path = state.archive().dir.join(format!("{digest}.csv"));
            Ok(JobOutput { outputs: vec![rel(state, &path)], log: vec![format!("{} points, digest {digest}", points.len())] })
        }
        JobKind::Label => {
            let p: LabelParams = serde_json::from_value(params)?;
            let points = colosla_core::labeler::TelemetrySource::load(&state.archive(), &p.telemetry)
                .ok_or_else(|| CliError::Invalid(format!("telemetry {} not in archive", p.telemetry)))?;
            let ds = pipeline::label(&points, &state.rules_for(&p.customer))?;
            let out = dataset_path(state, &p.customer, &ds.digest());
            ds.write(&out)?;
            state.datasets.lock().unwrap().insert(p.customer.clone(), out.clone());
            Ok(JobOutput { outputs: vec![rel(state, &out)], log: vec![format!("{} windows, labels {:?}", ds.len(), ds.label_counts())] })
        }
        JobKind::Relabel => run_relabel(state, &serde_json::from_value(params)?),
        JobKind::Train => {
            let p: TrainParams = serde_json::from_value(params)?;
            let rules = state.rules_for(&p.customer);
            let ds = match p.dataset.clone().or_else(|| state.datasets.lock().unwrap().get(&p.customer).cloned()) {
                Some(d) => LabeledDataset::read(&if d.is_absolute() { d } else { state.config.data_dir.join(d) })?,
                None => pipeline::label(&p.config.simulation.run(&rules)?, &rules)?,
            };
            let (model, report) = pipeline::train_model(&ds, &rules, &p.customer, &p.config)?;
            let path = state.model_path(&p.customer);
            pipeline::save_model(&model, &path)?;
            let report_path = path.with_extension("report.json");
            pipeline::write_file(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            // the next ingest picks up the new checkpoint
            state.engines.lock().unwrap().remove(&p.customer);
            let last = report.train_loss_history.last().copied().unwrap_or(f64::NAN);
            Ok(JobOutput {
                outputs: vec![rel(state, &path), rel(state, &report_path)],
                log: vec![format!("param_count {}, final train loss {last:.6}, min macro-F1 {:.3}", model.param_count(), report.min_macro_f1())],
            })
        }
        JobKind::Extract => {
            let req: ExtractRequest = serde_json::from_value(params)?;
            let (complete, body) = run_extract(state, &req)?;
            if !complete {
                return Err(CliError::Incomplete(serde_json::from_value(body["open_questions"].clone()).unwrap_or_default()));
            }
            Ok(JobOutput { outputs: vec![rel(state, &state.config.data_dir.join("rules.jsonl"))], log: vec![body["rules"].to_string()] })
        }
    }
}

async fn post_job(
    State(state): State<Arc<AppState>>,
    UrlPath(kind): UrlPath<String>,
    body: Option<Json<Value>>,
) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let kind = JobKind::parse(&kind).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job kind {kind}")))?;
    let params = body.map(|Json(v)| v).unwrap_or_else(|| json!({}));
    let st = state.clone();
    let p = params.clone();
    let rec = state.jobs.submit(kind, &params, move || run_job(&st, kind, p).map_err(|e| e.one_line()));
    Ok((StatusCode::ACCEPTED, Json(rec)))
}

#[derive(Debug, Default, Deserialize)]
struct EventQuery {
    customer: Option<String>,
    /// Only events whose window ends after this timestamp.
    since: Option<i64>,
}

impl EventQuery {
    fn keeps(&self, p: &Published) -> bool {
        self.customer.as_ref().is_none_or(|c| *c == p.event.customer) && self.since.is_none_or(|t| p.event.window_end > t)
    }
}

/// Backlog matching the query (only when `since` is given), then live events.
async fn event_stream(
    State(state): State<Arc<AppState>>,
    Query(q): Query<EventQuery>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.events.subscribe();
    let backlog: Vec<Published> =
        if q.since.is_some() { state.log.read().unwrap().iter().filter(|p| q.keeps(p)).cloned().collect() } else { Vec::new() };
    let live = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(p) => return Some((p, rx)),
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!(skipped = n, "event stream lagged"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let stream = futures::stream::iter(backlog)
        .chain(live)
        .filter(move |p| std::future::ready(q.keeps(p)))
        .map(|p| {
            let data = serde_json::to_string(&p).unwrap_or_default();
            Ok(Event::default().event("prediction").id(p.event.event_id.clone()).data(data))
        });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn get_view(
    State(state): State<Arc<AppState>>,
    UrlPath(view): UrlPath<String>,
    Query(q): Query<EventQuery>,
) -> ApiResult<Json<Value>> {
    let log = state.log.read().unwrap();
    let selected = log.iter().filter(|p| q.keeps(p));
    match view.as_str() {
        "finance" => {
            let rows: Vec<&FinanceView> = selected.filter_map(|p| p.finance.as_ref()).collect();
            let total: f64 = rows.iter().map(|f| f.expected_credit_usd).sum();
            Ok(Json(json!({"rows": rows, "expected_credit_usd_total": total})))
        }
        "ops" => Ok(Json(json!({"rows": selected.map(|p| &p.ops).collect::<Vec<_>>()}))),
        "compliance" => {
            let rows: Vec<&AuditRecord> = selected.map(|p| &p.audit).collect();
            let mut chains = BTreeMap::new();
            let customers: std::collections::BTreeSet<&str> = log.iter().map(|p| p.event.customer.as_str()).collect();
            for c in customers {
                let own: Vec<AuditRecord> = log.iter().filter(|p| p.event.customer == c).map(|p| p.audit.clone()).collect();
                let status = verify_chain(&own);
                let verified = match &status {
                    ChainStatus::Ok { records } => *records,
                    ChainStatus::Broken { index, .. } => *index,
                };
                chains.insert(c.to_string(), json!({"status": status, "verified_records": verified, "head": own.last().map(|r| &r.chain_digest)}));
            }
            Ok(Json(json!({"rows": rows, "chains": chains})))
        }
        other => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown view {other}; use finance, ops or compliance"))),
    }
}

/// Bind, serve until Ctrl-C, then flush the engines.
pub async fn serve(config: ServiceConfig) -> Result<(), CliError> {
    let bind = config.bind.clone();
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .map_err(|e| CliError::Config(format!("cannot bind {bind}: {e}")))?;
    tracing::info!(%bind, "listening");
    eprintln!("listening on {bind}");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Config(e.to_string()))?;
    state.flush()
}

