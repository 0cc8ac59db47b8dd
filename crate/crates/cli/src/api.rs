//! HTTP API under `/v1`, with a server-sent event stream per run.
//!
//! Campaigns run on their own threads; handlers never wait on approvals.
//! Mutating endpoints accept an optional `request_key`: a repeated key
//! returns the first response unchanged.

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use droidprobe::approval::{ApprovalError, ApprovalGate, ApprovalMode, ApprovalPolicy, OperatorKind, Resolution};
use droidprobe::config::{ConfigError, ServiceConfig};
use droidprobe::device::{DeviceEndpoint, DeviceHub};
use droidprobe::engine::{AutoOperator, Campaign, Engine, EngineError, EventSink, ExternalOperator, RunEvent, Operator};
use droidprobe::llm::{LlmError, LlmGateway, PromptStyle, ProviderConfig, ProviderKind};
use droidprobe::metrics::{build_report, render_json, render_markdown, MetricsError};
use droidprobe::plan::{DeviceProfile, PlanGraph};
use droidprobe::store::{Envelope, RunStore, StoreError};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot, OnceCell};
use tower_http::cors::{AllowOrigin, CorsLayer};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("api token variable `{0}` is not set")]
    MissingToken(String),
    #[error("bad CORS origin `{0}`")]
    Cors(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), field: None }
    }

    fn bad_request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: Some(field.into()), ..Self::new(StatusCode::BAD_REQUEST, "validation", message) }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    fn body(&self) -> Value {
        json!({ "error": { "code": self.code, "message": self.message, "field": self.field } })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        if let Some(field) = e.field_path() {
            return Self::bad_request(field, e.to_string());
        }
        match e {
            EngineError::Llm(LlmError::Authentication(_) | LlmError::Transport { .. } | LlmError::Timeout { .. }) => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "provider_unavailable", e.to_string())
            }
            EngineError::Sink(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "store", e.to_string()),
            other => Self::new(StatusCode::BAD_REQUEST, "validation", other.to_string()),
        }
    }
}

impl From<ApprovalError> for ApiError {
    fn from(e: ApprovalError) -> Self {
        match &e {
            ApprovalError::UnknownTicket(id) => Self::not_found("ticket", id),
            ApprovalError::AlreadyResolved(_) => Self::new(StatusCode::CONFLICT, "already_resolved", e.to_string()),
            ApprovalError::EditDenied { .. } => {
                Self { field: Some("edited_body".into()), ..Self::new(StatusCode::BAD_REQUEST, "edit_denied", e.to_string()) }
            }
            _ => Self::new(StatusCode::BAD_REQUEST, "validation", e.to_string()),
        }
    }
}

type Stored = (StatusCode, Value);

/// Shared state behind every handler.
pub struct ServiceState {
    pub store: Arc<RunStore>,
    pub hub: Arc<DeviceHub>,
    pub gate: Arc<ApprovalGate>,
    pub plan: Arc<PlanGraph>,
    pub policy: Arc<ApprovalPolicy>,
    pub operator: OperatorKind,
    pub provider: ProviderConfig,
    pub abort: Arc<AtomicBool>,
    gateway: Option<LlmGateway>,
    token: Option<String>,
    cors_origins: Vec<String>,
    requests: Mutex<HashMap<String, Arc<OnceCell<Stored>>>>,
}

impl ServiceState {
    pub fn new(store: Arc<RunStore>, hub: Arc<DeviceHub>, plan: PlanGraph, policy: ApprovalPolicy, provider: ProviderConfig) -> Self {
        Self {
            store,
            hub,
            gate: Arc::new(ApprovalGate::new()),
            plan: Arc::new(plan),
            policy: Arc::new(policy),
            operator: OperatorKind::External,
            provider,
            abort: Arc::new(AtomicBool::new(false)),
            gateway: None,
            token: None,
            cors_origins: Vec::new(),
            requests: Mutex::new(HashMap::new()),
        }
    }

    /// Builds state from a config file: opens the store, aborts runs left
    /// open by a previous process, loads plan, policy and simulators.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let store = Arc::new(RunStore::open(&cfg.data_dir)?);
        if let Some(c) = store.recovered() {
            tracing::warn!(offset = c.offset, line = c.line, "event log had a corrupt tail; moved aside");
        }
        let aborted = store.abort_unfinished("service restarted")?;
        if !aborted.is_empty() {
            tracing::info!(runs = ?aborted, "aborted runs left open by a previous process");
        }
        let mut hub = DeviceHub::empty();
        for spec in cfg.simulators()? {
            hub.register_simulator(spec);
        }
        let (policy, operator) = cfg.policy()?;
        let mut state = Self::new(store, Arc::new(hub), cfg.plan()?, policy, cfg.provider.clone());
        state.operator = operator;
        state.cors_origins = cfg.cors_origins.clone();
        if let Some(var) = &cfg.api_token_env {
            let token = std::env::var(var).ok().filter(|t| !t.is_empty()).ok_or_else(|| ServiceError::MissingToken(var.clone()))?;
            state.token = Some(token);
        }
        Ok(state)
    }

    pub fn with_gateway(mut self, gateway: LlmGateway) -> Self {
        self.gateway = Some(gateway);
        self
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn with_operator(mut self, operator: OperatorKind) -> Self {
        self.operator = operator;
        self
    }

    pub fn with_cors_origins(mut self, origins: Vec<String>) -> Self {
        self.cors_origins = origins;
        self
    }

    fn engine(&self, sink: Arc<dyn EventSink>) -> Engine {
        let operator: Arc<dyn Operator> = match self.operator {
            OperatorKind::Auto => Arc::new(AutoOperator),
            _ => Arc::new(ExternalOperator),
        };
        let engine = Engine::new(self.hub.clone())
            .with_gate(self.gate.clone())
            .with_operator(operator)
            .with_sink(sink)
            .with_abort(self.abort.clone());
        match &self.gateway {
            Some(g) => engine.with_gateway(g.clone()),
            None => engine,
        }
    }

    /// Provider readiness: an HTTP provider needs its credential variable set.
    fn provider_ready(&self) -> Result<(), ApiError> {
        if self.gateway.is_some() || self.provider.kind == ProviderKind::Stub {
            return Ok(());
        }
        let var = self.provider.credential_source.as_deref().unwrap_or_default();
        match std::env::var(var) {
            Ok(v) if !v.is_empty() => Ok(()),
            _ => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "provider_unavailable", "provider credential is not configured")),
        }
    }

    /// Runs `f` at most once per `(scope, key)`; later calls get the stored outcome.
    async fn idempotent<F, Fut>(&self, scope: &str, key: Option<&str>, f: F) -> Response
    where
        F: FnOnce() -> Fut,
        Fut: std::future::Future<Output = Result<(StatusCode, Value), ApiError>>,
    {
        let run = || async {
            match f().await {
                Ok(ok) => ok,
                Err(e) => (e.status, e.body()),
            }
        };
        let (status, body) = match key {
            None => run().await,
            Some(key) => {
                let cell = self.requests.lock().unwrap().entry(format!("{scope}\u{0}{key}")).or_default().clone();
                cell.get_or_init(run).await.clone()
            }
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    let api = Router::new()
        .route("/campaigns", get(list_campaigns).post(create_campaign))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/report", get(get_report))
        .route("/tickets", get(list_tickets))
        .route("/tickets/{id}/resolve", post(resolve_ticket))
        .route("/devices", get(list_devices))
        .route("/generate", post(generate))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let mut app = Router::new().nest("/v1", api).with_state(state.clone());
    if !state.cors_origins.is_empty() {
        let origins: Vec<HeaderValue> = state.cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION, header::HeaderName::from_static("last-event-id")]),
        );
    }
    app
}

async fn require_token(State(state): State<Arc<ServiceState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

// ---------------------------------------------------------------------------
// Campaigns and runs

async fn list_campaigns(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    Json(json!({ "runs": state.store.runs() }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateCampaign {
    #[serde(default)]
    request_key: Option<String>,
    devices: Vec<String>,
    #[serde(default)]
    style: Option<PromptStyle>,
    #[serde(default)]
    retry_budget: Option<u32>,
    #[serde(default)]
    steps: Option<Vec<String>>,
    #[serde(default)]
    approval_mode: Option<ApprovalMode>,
}

/// Forwards to the store and reports the first write, so the caller can
/// answer only once the run is visible.
struct StartSignal {
    store: Arc<RunStore>,
    started: Mutex<Option<oneshot::Sender<Result<(), EngineError>>>>,
}

impl EventSink for StartSignal {
    fn emit(&self, run_id: &str, event: &RunEvent) -> Result<(), String> {
        EventSink::emit(&*self.store, run_id, event)?;
        if let Some(tx) = self.started.lock().unwrap().take() {
            let _ = tx.send(Ok(()));
        }
        Ok(())
    }
}

async fn create_campaign(State(state): State<Arc<ServiceState>>, body: Result<Json<CreateCampaign>, axum::extract::rejection::JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return ApiError::bad_request("body", e.body_text()).into_response(),
    };
    let key = req.request_key.clone();
    let st = state.clone();
    state.idempotent("campaigns", key.as_deref(), || start_campaign(st, req)).await
}

async fn start_campaign(state: Arc<ServiceState>, req: CreateCampaign) -> Result<(StatusCode, Value), ApiError> {
    let mut devices = Vec::with_capacity(req.devices.len());
    for (i, d) in req.devices.iter().enumerate() {
        devices.push(d.parse::<DeviceEndpoint>().map_err(|e| ApiError::bad_request(format!("devices[{i}]"), e.to_string()))?);
    }
    let mut campaign = Campaign::new(state.plan.clone(), devices);
    campaign.provider = state.provider.clone();
    if let Some(s) = req.style {
        campaign.prompt_style = s;
    }
    if let Some(b) = req.retry_budget {
        campaign.retry_budget = b;
    }
    campaign.step_filter = req.steps.map(|s| s.into_iter().collect());
    campaign.policy = match req.approval_mode {
        Some(mode) => {
            let mut p = (*state.policy).clone();
            p.mode = mode;
            Arc::new(p)
        }
        None => state.policy.clone(),
    };
    campaign.validate(&state.hub)?;
    state.provider_ready()?;

    let run_id = Engine::new_run_id();
    let (tx, rx) = oneshot::channel();
    let started = Arc::new(StartSignal { store: state.store.clone(), started: Mutex::new(Some(tx)) });
    let engine = state.engine(started.clone());
    let id = run_id.clone();
    std::thread::Builder::new()
        .name(format!("campaign-{run_id}"))
        .spawn(move || {
            let result = engine.run_campaign_as(&id, &campaign);
            match result {
                Ok(run) => tracing::info!(run = %id, status = ?run.status, "campaign finished"),
                Err(e) => {
                    tracing::error!(run = %id, error = %e, "campaign failed");
                    if let Some(tx) = started.started.lock().unwrap().take() {
                        let _ = tx.send(Err(e));
                    }
                }
            }
        })
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "spawn", e.to_string()))?;
    match rx.await {
        Ok(Ok(())) => Ok((StatusCode::ACCEPTED, json!({ "run_id": run_id }))),
        Ok(Err(e)) => Err(e.into()),
        Err(_) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "campaign", "campaign worker exited")),
    }
}

async fn get_run(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let run = state.store.run(&id).ok_or_else(|| ApiError::not_found("run", &id))?;
    Ok(Json(serde_json::to_value(run).expect("run serializes")))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after: Option<u64>,
}

fn is_terminal(event: &RunEvent) -> bool {
    matches!(event, RunEvent::RunCompleted { .. } | RunEvent::RunAborted { .. })
}

fn sse_event(env: &Envelope) -> Event {
    let body = serde_json::to_value(env).expect("envelope serializes");
    let kind = body["event"]["type"].as_str().unwrap_or("event").to_string();
    Event::default().id(env.seq.to_string()).event(kind).data(body.to_string())
}

/// Backlog after `Last-Event-ID` (or `?after=`), then live events, each
/// exactly once and in log order. The stream ends after the run's last event.
async fn run_events(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    if state.store.run(&id).is_none() {
        return Err(ApiError::not_found("run", &id));
    }
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(q.after)
        .unwrap_or(0);
    let (tx, rx) = mpsc::unbounded_channel::<Arc<Envelope>>();
    let run_id = id.clone();
    let backlog: VecDeque<_> = state
        .store
        .subscribe(
            &id,
            after,
            Box::new(move |env| {
                if env.run_id != run_id {
                    return !tx.is_closed();
                }
                tx.send(env.clone()).is_ok() && !is_terminal(&env.event)
            }),
        )
        .into();
    let stream = futures::stream::unfold((backlog, rx, false), |(mut backlog, mut rx, done)| async move {
        if done {
            return None;
        }
        let env = match backlog.pop_front() {
            Some(e) => e,
            None => rx.recv().await?,
        };
        let done = is_terminal(&env.event);
        Some((Ok(sse_event(&env)), (backlog, rx, done)))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn get_report(State(state): State<Arc<ServiceState>>, Path(id): Path<String>, Query(q): Query<ReportQuery>) -> Result<Response, ApiError> {
    let format = q.format.as_deref().unwrap_or("json");
    if format != "json" && format != "md" {
        return Err(ApiError::bad_request("format", format!("unknown report format `{format}` (expected json|md)")));
    }
    let run = state.store.run(&id).ok_or_else(|| ApiError::not_found("run", &id))?;
    let plan = run
        .plan()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "plan", e.to_string()))?;
    let report = build_report(&run, &plan).map_err(|e| match e {
        MetricsError::NotCompleted(_) => ApiError::new(StatusCode::CONFLICT, "not_completed", e.to_string()),
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "report", other.to_string()),
    })?;
    let (json_text, md) = (render_json(&report), render_markdown(&report));
    if let Err(e) = state.store.save_report(&id, &json_text, &md) {
        tracing::warn!(run = %id, error = %e, "could not save report");
    }
    Ok(match format {
        "md" => ([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], md).into_response(),
        _ => ([(header::CONTENT_TYPE, "application/json")], json_text).into_response(),
    })
}

// ---------------------------------------------------------------------------
// Tickets

#[derive(Debug, Deserialize)]
struct TicketQuery {
    #[serde(default)]
    open: Option<bool>,
}

#[derive(Serialize)]
struct TicketView {
    #[serde(flatten)]
    ticket: droidprobe::approval::ApprovalTicket,
    script: Option<droidprobe::script::GeneratedScript>,
}

fn ticket_view(gate: &ApprovalGate, ticket: droidprobe::approval::ApprovalTicket) -> TicketView {
    let script = gate.script(&ticket.lineage_key, ticket.version);
    TicketView { ticket, script }
}

async fn list_tickets(State(state): State<Arc<ServiceState>>, Query(q): Query<TicketQuery>) -> Json<Value> {
    let open_only = q.open.unwrap_or(true);
    let tickets: Vec<TicketView> = state.gate.tickets(open_only).into_iter().map(|t| ticket_view(&state.gate, t)).collect();
    Json(json!({ "tickets": tickets }))
}

#[derive(Debug, Deserialize)]
struct ResolveRequest {
    #[serde(default)]
    request_key: Option<String>,
    #[serde(flatten)]
    resolution: Resolution,
}

async fn resolve_ticket(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    body: Result<Json<ResolveRequest>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return ApiError::bad_request("body", e.body_text()).into_response(),
    };
    let scope = format!("resolve\u{0}{id}");
    let st = state.clone();
    state
        .idempotent(&scope, req.request_key.as_deref(), || async move {
            if req.resolution.operator.trim().is_empty() {
                return Err(ApiError::bad_request("operator", "operator id must not be empty"));
            }
            let (ticket, script) = st.gate.resolve(&id, req.resolution)?;
            Ok((StatusCode::OK, json!({ "ticket": ticket, "script": script })))
        })
        .await
}

// ---------------------------------------------------------------------------
// Devices and single-step generation

#[derive(Serialize)]
struct DeviceView {
    endpoint: String,
    column: String,
    profile: DeviceProfile,
}

async fn list_devices(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    let devices: Vec<DeviceView> = state
        .hub
        .simulator_profiles()
        .into_iter()
        .map(|p| DeviceView { endpoint: DeviceEndpoint::simulated(p.name.clone()).to_string(), column: p.column_label(), profile: p })
        .collect();
    Json(json!({ "devices": devices }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    #[serde(default)]
    request_key: Option<String>,
    step_id: String,
    device: String,
    #[serde(default)]
    style: Option<PromptStyle>,
}

async fn generate(State(state): State<Arc<ServiceState>>, body: Result<Json<GenerateRequest>, axum::extract::rejection::JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return ApiError::bad_request("body", e.body_text()).into_response(),
    };
    let st = state.clone();
    state
        .idempotent("generate", req.request_key.clone().as_deref(), || async move {
            let endpoint: DeviceEndpoint = req.device.parse().map_err(|e: droidprobe::device::DeviceError| ApiError::bad_request("device", e.to_string()))?;
            let profile = st.hub.profile_for(&endpoint).map_err(|e| ApiError::bad_request("device", e.to_string()))?;
            if st.plan.step(&req.step_id).is_none() {
                return Err(ApiError::bad_request("step_id", format!("unknown step `{}`", req.step_id)));
            }
            st.provider_ready()?;
            let style = req.style.unwrap_or(PromptStyle::Structured);
            let worker = st.clone();
            let generated = tokio::task::spawn_blocking(move || {
                let engine = worker.engine(Arc::new(droidprobe::engine::NullSink));
                engine.generate_step(&worker.plan, &req.step_id, &profile, style, &worker.provider, worker.policy.clone())
            })
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "generate", e.to_string()))??;
            Ok((
                StatusCode::OK,
                json!({
                    "prompt": generated.prompt,
                    "raw_completion": generated.raw_completion,
                    "scripts": generated.scripts,
                    "tickets": generated.tickets,
                }),
            ))
        })
        .await
}

/// Serves until ctrl-c, then aborts running campaigns.
pub async fn serve(state: Arc<ServiceState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let abort = state.abort.clone();
    let gate = state.gate.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
            abort.store(true, Ordering::SeqCst);
            gate.notify();
        })
        .await
}
