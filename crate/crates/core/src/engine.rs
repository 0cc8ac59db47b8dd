//! Campaign execution: device × step walk, the prompt → script → approval →
//! execution → verdict cycle, and re-prompting on failure.
//!
//! Every state change is an [`RunEvent`]. The [`RunRecord`] handed back to
//! callers is the fold of those events, the same fold the run store applies
//! on replay.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approval::{ApprovalError, ApprovalGate, ApprovalMode, ApprovalPolicy, ApprovalTicket, Resolution, ScreenOutcome, TicketDecision};
use crate::device::{ApprovedScript, DetectionEvent, DeviceEndpoint, DeviceError, DeviceHub, DeviceSession, ShellResult};
use crate::llm::{build_prompt, scripts_digest, FailureContext, LlmError, LlmGateway, Prompt, PromptRequest, PromptStyle, ProviderConfig, ProviderKind};
use crate::plan::{environment_gate, load_plan, DeviceProfile, PlanError, PlanGraph, PlanStep, UnsupportedReason, Verdict};
use crate::script::{extract_scripts, validation_script, ApprovalState, GeneratedScript, ScriptError, ScriptKind};
use crate::sha256_hex;

pub const DEFAULT_RETRY_BUDGET: u32 = 2;
pub const MAX_RETRY_BUDGET: u32 = 5;
pub const DEFAULT_EXEC_TIMEOUT: Duration = Duration::from_secs(120);

pub const REJECTED_ANNOTATION: &str = "rejected by operator";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("campaign has no devices")]
    NoDevices,
    #[error("retry budget {budget} exceeds the maximum of {max}")]
    RetryBudget { budget: u32, max: u32 },
    #[error("step filter names unknown step `{0}`")]
    UnknownStep(String),
    #[error("devices[{index}] ({endpoint}): {source}")]
    Device { index: usize, endpoint: String, source: DeviceError },
    #[error("devices[{index}] ({endpoint}) is a real device and is not on the target allowlist")]
    NotAllowlisted { index: usize, endpoint: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Approval(#[from] ApprovalError),
    #[error("event sink failed: {0}")]
    Sink(String),
    #[error("run aborted by operator")]
    Aborted,
}

impl EngineError {
    /// Request field the error refers to, for validation responses.
    pub fn field_path(&self) -> Option<String> {
        match self {
            Self::NoDevices => Some("devices".into()),
            Self::Device { index, .. } | Self::NotAllowlisted { index, .. } => Some(format!("devices[{index}]")),
            Self::RetryBudget { .. } => Some("retry_budget".into()),
            Self::UnknownStep(_) => Some("step_filter".into()),
            Self::Llm(LlmError::InvalidConfig(_)) => Some("provider".into()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub plan: Arc<PlanGraph>,
    pub devices: Vec<DeviceEndpoint>,
    pub prompt_style: PromptStyle,
    pub provider: ProviderConfig,
    pub policy: Arc<ApprovalPolicy>,
    /// Re-prompts allowed per step after the first attempt.
    pub retry_budget: u32,
    pub step_filter: Option<BTreeSet<String>>,
}

impl Campaign {
    pub fn new(plan: Arc<PlanGraph>, devices: Vec<DeviceEndpoint>) -> Self {
        Self {
            plan,
            devices,
            prompt_style: PromptStyle::Structured,
            provider: ProviderConfig::stub(),
            policy: Arc::new(ApprovalPolicy::default()),
            retry_budget: DEFAULT_RETRY_BUDGET,
            step_filter: None,
        }
    }

    /// Checks preconditions and resolves every device's profile.
    pub fn validate(&self, hub: &DeviceHub) -> Result<Vec<DeviceProfile>, EngineError> {
        if self.devices.is_empty() {
            return Err(EngineError::NoDevices);
        }
        if self.retry_budget > MAX_RETRY_BUDGET {
            return Err(EngineError::RetryBudget { budget: self.retry_budget, max: MAX_RETRY_BUDGET });
        }
        if let Some(filter) = &self.step_filter {
            if let Some(unknown) = filter.iter().find(|id| self.plan.step(id).is_none()) {
                return Err(EngineError::UnknownStep(unknown.clone()));
            }
        }
        self.provider.validate()?;
        self.devices
            .iter()
            .enumerate()
            .map(|(index, endpoint)| {
                if endpoint.is_real() && self.policy.check_target(&endpoint.to_string()).is_err() {
                    return Err(EngineError::NotAllowlisted { index, endpoint: endpoint.to_string() });
                }
                hub.profile_for(endpoint).map_err(|source| EngineError::Device {
                    index,
                    endpoint: endpoint.to_string(),
                    source,
                })
            })
            .collect()
    }

    /// Steps in scope, in execution order.
    pub fn steps(&self) -> Vec<&PlanStep> {
        self.plan
            .execution_order()
            .into_iter()
            .filter(|s| self.step_filter.as_ref().is_none_or(|f| f.contains(&s.id)))
            .collect()
    }

    fn snapshot(&self, profiles: &[DeviceProfile]) -> CampaignSnapshot {
        CampaignSnapshot {
            plan_name: self.plan.name.clone(),
            plan_document: self.plan.to_document(),
            devices: self
                .devices
                .iter()
                .zip(profiles)
                .map(|(e, p)| DeviceSnapshot { endpoint: e.to_string(), profile: p.clone() })
                .collect(),
            prompt_style: self.prompt_style,
            provider: ProviderSnapshot { kind: self.provider.kind, model_name: self.provider.model_name.clone() },
            approval_mode: self.policy.mode,
            deny_rules: self.policy.deny_rules.iter().map(|r| r.rule_id.clone()).collect(),
            retry_budget: self.retry_budget,
            step_filter: self.step_filter.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSnapshot {
    pub endpoint: String,
    pub profile: DeviceProfile,
}

/// Provider identity without endpoint or credential details.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderSnapshot {
    pub kind: ProviderKind,
    pub model_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSnapshot {
    pub plan_name: String,
    pub plan_document: String,
    pub devices: Vec<DeviceSnapshot>,
    pub prompt_style: PromptStyle,
    pub provider: ProviderSnapshot,
    pub approval_mode: ApprovalMode,
    pub deny_rules: Vec<String>,
    pub retry_budget: u32,
    pub step_filter: Option<BTreeSet<String>>,
}

// ---------------------------------------------------------------------------
// Events

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    RunStarted { campaign: CampaignSnapshot, at: DateTime<Utc> },
    EnvironmentGated { device: String, step_id: String, reason: UnsupportedReason },
    AttemptStarted { device: String, step_id: String, attempt: u32, prompt_digest: String, prompt: String, at: DateTime<Utc> },
    ScriptGenerated { device: String, script: GeneratedScript },
    ScriptDenied { device: String, script_key: String, rule_id: String },
    ScriptAutoApproved { device: String, script_key: String },
    ApprovalRequested { device: String, ticket: ApprovalTicket },
    ApprovalResolved { device: String, ticket: ApprovalTicket, script: GeneratedScript },
    ShellExecuted { device: String, step_id: String, attempt: u32, execution: Execution },
    AttemptEnded { device: String, step_id: String, attempt: u32, verdict: Verdict, note: Option<String>, at: DateTime<Utc> },
    StepFinalized { device: String, step_id: String, verdict: Verdict, annotation: Option<String>, limitation: Option<String> },
    RunCompleted { at: DateTime<Utc> },
    RunAborted { reason: String, at: DateTime<Utc> },
}

impl RunEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::RunStarted { .. } => "run_started",
            Self::EnvironmentGated { .. } => "environment_gated",
            Self::AttemptStarted { .. } => "attempt_started",
            Self::ScriptGenerated { .. } => "script_generated",
            Self::ScriptDenied { .. } => "script_denied",
            Self::ScriptAutoApproved { .. } => "script_auto_approved",
            Self::ApprovalRequested { .. } => "approval_requested",
            Self::ApprovalResolved { .. } => "approval_resolved",
            Self::ShellExecuted { .. } => "shell_executed",
            Self::AttemptEnded { .. } => "attempt_ended",
            Self::StepFinalized { .. } => "step_finalized",
            Self::RunCompleted { .. } => "run_completed",
            Self::RunAborted { .. } => "run_aborted",
        }
    }
}

/// Receives run events in order. Engines stop when a sink fails.
pub trait EventSink: Send + Sync {
    fn emit(&self, run_id: &str, event: &RunEvent) -> Result<(), String>;
}

#[derive(Debug, Default)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _run_id: &str, _event: &RunEvent) -> Result<(), String> {
        Ok(())
    }
}

/// Keeps every event in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    events: Mutex<Vec<(String, RunEvent)>>,
}

impl MemorySink {
    pub fn events(&self) -> Vec<(String, RunEvent)> {
        self.events.lock().unwrap().clone()
    }
}

impl EventSink for MemorySink {
    fn emit(&self, run_id: &str, event: &RunEvent) -> Result<(), String> {
        self.events.lock().unwrap().push((run_id.to_string(), event.clone()));
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run record (event fold)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    AwaitingApproval,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    /// `lineage#version` of the script that ran.
    pub script_key: String,
    pub script_id: String,
    pub kind: ScriptKind,
    pub result: ShellResult,
    pub detection: Option<DetectionEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAttempt {
    pub attempt_number: u32,
    pub prompt_digest: String,
    pub script_ids: Vec<String>,
    pub executions: Vec<Execution>,
    pub verdict: Option<Verdict>,
    pub note: Option<String>,
    pub started_at: DateTime<Utc>,
    pub ended_at: Option<DateTime<Utc>>,
}

impl StepAttempt {
    pub fn shell_results(&self) -> impl Iterator<Item = &ShellResult> {
        self.executions.iter().map(|e| &e.result)
    }

    pub fn detections(&self) -> impl Iterator<Item = &DetectionEvent> {
        self.executions.iter().filter_map(|e| e.detection.as_ref())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub attempts: Vec<StepAttempt>,
    pub final_verdict: Option<Verdict>,
    pub annotation: Option<String>,
    pub limitation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub campaign: Option<CampaignSnapshot>,
    pub status: RunStatus,
    /// device endpoint → step id → record.
    pub steps: BTreeMap<String, BTreeMap<String, StepRecord>>,
    /// `lineage#version` → latest known state of that script version.
    pub scripts: BTreeMap<String, GeneratedScript>,
    pub tickets: BTreeMap<String, ApprovalTicket>,
    pub abort_reason: Option<String>,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
}

pub fn script_key(script: &GeneratedScript) -> String {
    format!("{}#{}", script.lineage_key(), script.version)
}

impl RunRecord {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            campaign: None,
            status: RunStatus::Running,
            steps: BTreeMap::new(),
            scripts: BTreeMap::new(),
            tickets: BTreeMap::new(),
            abort_reason: None,
            started_at: None,
            ended_at: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.status, RunStatus::Completed | RunStatus::Aborted)
    }

    /// Plan reconstructed from the campaign snapshot.
    pub fn plan(&self) -> Result<PlanGraph, PlanError> {
        let doc = self.campaign.as_ref().map(|c| c.plan_document.as_str()).unwrap_or("");
        load_plan(doc)
    }

    pub fn step(&self, device: &str, step_id: &str) -> Option<&StepRecord> {
        self.steps.get(device)?.get(step_id)
    }

    pub fn final_verdict(&self, device: &str, step_id: &str) -> Option<Verdict> {
        self.step(device, step_id)?.final_verdict
    }

    /// Executions whose script has no Approved record. Empty for every sound run.
    pub fn unapproved_executions(&self) -> Vec<&Execution> {
        self.steps
            .values()
            .flat_map(|m| m.values())
            .flat_map(|s| &s.attempts)
            .flat_map(|a| &a.executions)
            .filter(|e| {
                self.scripts
                    .get(&e.script_key)
                    .is_none_or(|s| s.approval_state != ApprovalState::Approved || s.script_id != e.script_id)
            })
            .collect()
    }

    fn step_mut(&mut self, device: &str, step_id: &str) -> &mut StepRecord {
        self.steps.entry(device.to_string()).or_default().entry(step_id.to_string()).or_default()
    }

    fn attempt_mut(&mut self, device: &str, step_id: &str) -> Option<&mut StepAttempt> {
        self.step_mut(device, step_id).attempts.last_mut()
    }

    fn refresh_status(&mut self) {
        if self.is_finished() {
            return;
        }
        self.status = if self.tickets.values().any(|t| t.is_open()) {
            RunStatus::AwaitingApproval
        } else {
            RunStatus::Running
        };
    }

    pub fn apply(&mut self, event: &RunEvent) {
        match event {
            RunEvent::RunStarted { campaign, at } => {
                self.campaign = Some(campaign.clone());
                self.started_at = Some(*at);
                for d in &campaign.devices {
                    self.steps.entry(d.endpoint.clone()).or_default();
                }
            }
            RunEvent::EnvironmentGated { device, step_id, reason } => {
                let rec = self.step_mut(device, step_id);
                rec.final_verdict = Some(Verdict::EnvironmentUnsupported { reason: *reason });
            }
            RunEvent::AttemptStarted { device, step_id, attempt, prompt_digest, at, .. } => {
                self.step_mut(device, step_id).attempts.push(StepAttempt {
                    attempt_number: *attempt,
                    prompt_digest: prompt_digest.clone(),
                    script_ids: Vec::new(),
                    executions: Vec::new(),
                    verdict: None,
                    note: None,
                    started_at: *at,
                    ended_at: None,
                });
            }
            RunEvent::ScriptGenerated { device, script } => {
                if let Some(a) = self.attempt_mut(device, &script.source.step_id) {
                    a.script_ids.push(script.script_id.clone());
                }
                self.scripts.insert(script_key(script), script.clone());
            }
            RunEvent::ScriptDenied { script_key, .. } => {
                if let Some(s) = self.scripts.get_mut(script_key) {
                    s.approval_state = ApprovalState::AutoDenied;
                }
            }
            RunEvent::ScriptAutoApproved { script_key, .. } => {
                if let Some(s) = self.scripts.get_mut(script_key) {
                    s.approval_state = ApprovalState::Approved;
                }
            }
            RunEvent::ApprovalRequested { ticket, .. } => {
                self.tickets.insert(ticket.ticket_id.clone(), ticket.clone());
            }
            RunEvent::ApprovalResolved { device, ticket, script } => {
                self.tickets.insert(ticket.ticket_id.clone(), ticket.clone());
                if script.version != ticket.version {
                    if let Some(a) = self.attempt_mut(device, &script.source.step_id) {
                        a.script_ids.push(script.script_id.clone());
                    }
                }
                self.scripts.insert(script_key(script), script.clone());
            }
            RunEvent::ShellExecuted { device, step_id, execution, .. } => {
                if let Some(a) = self.attempt_mut(device, step_id) {
                    a.executions.push(execution.clone());
                }
            }
            RunEvent::AttemptEnded { device, step_id, verdict, note, at, .. } => {
                if let Some(a) = self.attempt_mut(device, step_id) {
                    a.verdict = Some(*verdict);
                    a.note = note.clone();
                    a.ended_at = Some(*at);
                }
            }
            RunEvent::StepFinalized { device, step_id, verdict, annotation, limitation } => {
                let rec = self.step_mut(device, step_id);
                rec.final_verdict = Some(*verdict);
                rec.annotation = annotation.clone();
                rec.limitation = limitation.clone();
            }
            RunEvent::RunCompleted { at } => {
                self.status = RunStatus::Completed;
                self.ended_at = Some(*at);
            }
            RunEvent::RunAborted { reason, at } => {
                self.status = RunStatus::Aborted;
                self.abort_reason = Some(reason.clone());
                self.ended_at = Some(*at);
            }
        }
        self.refresh_status();
    }

    pub fn from_events<'a>(run_id: &str, events: impl IntoIterator<Item = &'a RunEvent>) -> Self {
        let mut rec = Self::new(run_id);
        for e in events {
            rec.apply(e);
        }
        rec
    }
}

// ---------------------------------------------------------------------------
// Verdicts

/// Blocked if any detection fired; Worked iff every script exited 0 and the
/// validation run exited 0 with the step's marker on stdout; else NotWorked.
pub fn evaluate_verdict(
    step: &PlanStep,
    shell_results: &[ShellResult],
    validation: Option<&ShellResult>,
    detections: &[DetectionEvent],
) -> Verdict {
    if let Some(d) = detections.first() {
        return Verdict::Blocked { mechanism: d.mechanism };
    }
    let all_clean = shell_results.iter().all(|r| r.exit_code == 0);
    let validated = validation.is_some_and(|v| v.exit_code == 0 && v.stdout.contains(&step.validation.marker));
    if all_clean && validated {
        Verdict::Worked
    } else {
        Verdict::NotWorked
    }
}

// ---------------------------------------------------------------------------
// Operators

/// Whoever answers approval tickets raised by a running campaign.
pub trait Operator: Send + Sync {
    /// Called once per ticket, on the device's worker thread, before the
    /// worker blocks on the decision.
    fn on_ticket(&self, gate: &ApprovalGate, ticket: &ApprovalTicket, script: &GeneratedScript);
}

/// Approves every cleared script at once. Used for unattended test runs.
#[derive(Debug, Default)]
pub struct AutoOperator;

pub const AUTO_OPERATOR_ID: &str = "auto-operator";

impl Operator for AutoOperator {
    fn on_ticket(&self, gate: &ApprovalGate, ticket: &ApprovalTicket, _script: &GeneratedScript) {
        if let Err(e) = gate.resolve(&ticket.ticket_id, Resolution::approve(AUTO_OPERATOR_ID)) {
            tracing::debug!(ticket = %ticket.ticket_id, error = %e, "auto-operator lost the race");
        }
    }
}

/// Leaves tickets for someone else (the HTTP API) to resolve.
#[derive(Debug, Default)]
pub struct ExternalOperator;

impl Operator for ExternalOperator {
    fn on_ticket(&self, _gate: &ApprovalGate, _ticket: &ApprovalTicket, _script: &GeneratedScript) {}
}

type DecideFn = dyn Fn(&ApprovalTicket, &GeneratedScript) -> Option<Resolution> + Send + Sync;

/// Operator driven by a closure; `None` leaves the ticket open.
pub struct ScriptedOperator(Box<DecideFn>);

impl ScriptedOperator {
    pub fn new(f: impl Fn(&ApprovalTicket, &GeneratedScript) -> Option<Resolution> + Send + Sync + 'static) -> Self {
        Self(Box::new(f))
    }
}

impl Operator for ScriptedOperator {
    fn on_ticket(&self, gate: &ApprovalGate, ticket: &ApprovalTicket, script: &GeneratedScript) {
        if let Some(resolution) = (self.0)(ticket, script) {
            if let Err(e) = gate.resolve(&ticket.ticket_id, resolution) {
                tracing::warn!(ticket = %ticket.ticket_id, error = %e, "scripted resolution failed");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Engine

pub struct Engine {
    hub: Arc<DeviceHub>,
    gate: Arc<ApprovalGate>,
    operator: Arc<dyn Operator>,
    sink: Arc<dyn EventSink>,
    gateway: Option<LlmGateway>,
    abort: Arc<AtomicBool>,
    exec_timeout: Duration,
}

impl Engine {
    pub fn new(hub: Arc<DeviceHub>) -> Self {
        Self {
            hub,
            gate: Arc::new(ApprovalGate::new()),
            operator: Arc::new(AutoOperator),
            sink: Arc::new(NullSink),
            gateway: None,
            abort: Arc::new(AtomicBool::new(false)),
            exec_timeout: DEFAULT_EXEC_TIMEOUT,
        }
    }

    pub fn with_gate(mut self, gate: Arc<ApprovalGate>) -> Self {
        self.gate = gate;
        self
    }

    pub fn with_operator(mut self, operator: Arc<dyn Operator>) -> Self {
        self.operator = operator;
        self
    }

    pub fn with_sink(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sink = sink;
        self
    }

    /// Overrides the gateway built from the campaign's provider config.
    pub fn with_gateway(mut self, gateway: LlmGateway) -> Self {
        self.gateway = Some(gateway);
        self
    }

    pub fn with_abort(mut self, abort: Arc<AtomicBool>) -> Self {
        self.abort = abort;
        self
    }

    pub fn with_exec_timeout(mut self, timeout: Duration) -> Self {
        self.exec_timeout = timeout;
        self
    }

    pub fn gate(&self) -> &Arc<ApprovalGate> {
        &self.gate
    }

    pub fn hub(&self) -> &Arc<DeviceHub> {
        &self.hub
    }

    /// Raises the abort flag and wakes workers waiting on approvals.
    pub fn abort(&self) {
        self.abort.store(true, Ordering::SeqCst);
        self.gate.notify();
    }

    pub fn new_run_id() -> String {
        format!("run-{}", &uuid::Uuid::new_v4().simple().to_string()[..12])
    }

    pub fn run_campaign(&self, campaign: &Campaign) -> Result<RunRecord, EngineError> {
        self.run_campaign_as(&Self::new_run_id(), campaign)
    }

    /// Runs `campaign` under a caller-chosen run id. Precondition failures
    /// return before any event is emitted.
    pub fn run_campaign_as(&self, run_id: &str, campaign: &Campaign) -> Result<RunRecord, EngineError> {
        let profiles = campaign.validate(&self.hub)?;
        let gateway = match &self.gateway {
            Some(g) => g.clone(),
            None => LlmGateway::new(campaign.provider.clone())?,
        };
        let writer = RunWriter { run_id: run_id.to_string(), record: Mutex::new(RunRecord::new(run_id)), sink: &*self.sink };
        writer.emit(RunEvent::RunStarted { campaign: campaign.snapshot(&profiles), at: Utc::now() })?;

        let steps = campaign.steps();
        let results: Vec<Result<(), EngineError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = campaign
                .devices
                .iter()
                .zip(&profiles)
                .enumerate()
                .map(|(index, (endpoint, profile))| {
                    let worker = DeviceWorker {
                        engine: self,
                        index,
                        writer: &writer,
                        campaign,
                        gateway: &gateway,
                        endpoint,
                        device: endpoint.to_string(),
                        profile,
                        session_id: format!("{run_id}-d{index}"),
                    };
                    let steps = &steps;
                    scope.spawn(move || worker.run(steps))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("device worker panicked")).collect()
        });

        let failure = results.into_iter().find_map(Result::err);
        match failure {
            None => writer.emit(RunEvent::RunCompleted { at: Utc::now() })?,
            Some(EngineError::Sink(e)) => return Err(EngineError::Sink(e)),
            Some(e) => {
                let reason = e.to_string();
                writer.emit(RunEvent::RunAborted { reason, at: Utc::now() })?;
            }
        }
        Ok(writer.record.into_inner().unwrap())
    }

    /// Single-step mode: generates, screens and registers scripts for one step
    /// without executing anything. Cleared executable scripts get open tickets.
    pub fn generate_step(
        &self,
        plan: &PlanGraph,
        step_id: &str,
        profile: &DeviceProfile,
        style: PromptStyle,
        provider: &ProviderConfig,
        policy: Arc<ApprovalPolicy>,
    ) -> Result<GeneratedStep, EngineError> {
        let step = plan.step(step_id).ok_or_else(|| EngineError::UnknownStep(step_id.to_string()))?;
        let gateway = match &self.gateway {
            Some(g) => g.clone(),
            None => LlmGateway::new(provider.clone())?,
        };
        let request = PromptRequest {
            step_id: step.id.clone(),
            step_title: step.title.clone(),
            profile_summary: profile.summary(),
            style,
            flowchart: (style == PromptStyle::Structured).then(|| plan.serialize_flowchart()),
            failure_context: None,
        };
        let text = build_prompt(&request)?;
        let session_id = format!("gen-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
        let response = gateway.complete(&Prompt {
            text: text.clone(),
            step_id: step.id.clone(),
            root_state: profile.root_state,
            attempt: 1,
            session_id,
        })?;
        let mut scripts = extract_scripts(&response, step, 1)?;
        let mut tickets = Vec::new();
        for s in scripts.iter_mut() {
            if !s.interpreter.is_executable() {
                self.gate.register(s);
                continue;
            }
            if let ScreenOutcome::Cleared = self.gate.screen(s, &policy) {
                tickets.push(self.gate.request_approval(s, policy.clone())?);
            }
        }
        Ok(GeneratedStep { prompt: text, raw_completion: response.raw_text, scripts, tickets })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratedStep {
    pub prompt: String,
    pub raw_completion: String,
    pub scripts: Vec<GeneratedScript>,
    pub tickets: Vec<ApprovalTicket>,
}

/// Serializes events: sink first, then the in-memory fold.
struct RunWriter<'a> {
    run_id: String,
    record: Mutex<RunRecord>,
    sink: &'a dyn EventSink,
}

impl RunWriter<'_> {
    fn emit(&self, event: RunEvent) -> Result<(), EngineError> {
        let mut record = self.record.lock().unwrap();
        self.sink.emit(&self.run_id, &event).map_err(EngineError::Sink)?;
        record.apply(&event);
        Ok(())
    }
}

enum AttemptOutcome {
    Finished { verdict: Verdict, log: String, digest: String, limitation: Option<String> },
    NoScripts { message: String },
    Rejected { reason: String },
    ProviderFailed { message: String },
}

struct DeviceWorker<'a> {
    engine: &'a Engine,
    index: usize,
    writer: &'a RunWriter<'a>,
    campaign: &'a Campaign,
    gateway: &'a LlmGateway,
    endpoint: &'a DeviceEndpoint,
    device: String,
    profile: &'a DeviceProfile,
    session_id: String,
}

impl DeviceWorker<'_> {
    fn aborted(&self) -> bool {
        self.engine.abort.load(Ordering::SeqCst)
    }

    fn run(&self, steps: &[&PlanStep]) -> Result<(), EngineError> {
        let mut session: Option<Box<dyn DeviceSession>> = None;
        for step in steps {
            if self.aborted() {
                return Err(EngineError::Aborted);
            }
            if let Some(Verdict::EnvironmentUnsupported { reason }) = environment_gate(step, self.profile) {
                self.writer.emit(RunEvent::EnvironmentGated {
                    device: self.device.clone(),
                    step_id: step.id.clone(),
                    reason,
                })?;
                continue;
            }
            if session.is_none() {
                session = Some(self.engine.hub.open_session(self.endpoint).map_err(|source| EngineError::Device {
                    index: self.index,
                    endpoint: self.device.clone(),
                    source,
                })?);
            }
            self.execute_step(session.as_deref_mut().expect("session opened"), step)?;
        }
        Ok(())
    }

    fn finalize(&self, step: &PlanStep, verdict: Verdict, annotation: Option<String>, limitation: Option<String>) -> Result<(), EngineError> {
        self.writer.emit(RunEvent::StepFinalized {
            device: self.device.clone(),
            step_id: step.id.clone(),
            verdict,
            annotation,
            limitation,
        })
    }

    fn end_attempt(&self, step: &PlanStep, attempt: u32, verdict: Verdict, note: Option<String>) -> Result<(), EngineError> {
        self.writer.emit(RunEvent::AttemptEnded {
            device: self.device.clone(),
            step_id: step.id.clone(),
            attempt,
            verdict,
            note,
            at: Utc::now(),
        })
    }

    fn execute_step(&self, session: &mut dyn DeviceSession, step: &PlanStep) -> Result<(), EngineError> {
        let max_attempts = self.campaign.retry_budget + 1;
        let style = self.campaign.prompt_style;
        let mut failure: Option<FailureContext> = None;
        for attempt in 1..=max_attempts {
            let request = PromptRequest {
                step_id: step.id.clone(),
                step_title: step.title.clone(),
                profile_summary: self.profile.summary(),
                style,
                flowchart: (style == PromptStyle::Structured).then(|| self.campaign.plan.serialize_flowchart()),
                failure_context: failure.take(),
            };
            let text = build_prompt(&request)?;
            self.writer.emit(RunEvent::AttemptStarted {
                device: self.device.clone(),
                step_id: step.id.clone(),
                attempt,
                prompt_digest: sha256_hex(&text),
                prompt: text.clone(),
                at: Utc::now(),
            })?;
            let prompt = Prompt {
                text,
                step_id: step.id.clone(),
                root_state: self.profile.root_state,
                attempt,
                session_id: self.session_id.clone(),
            };
            let last = attempt == max_attempts;
            match self.attempt(session, step, &prompt)? {
                AttemptOutcome::Finished { verdict, log, digest, limitation } => {
                    self.end_attempt(step, attempt, verdict, None)?;
                    if verdict == Verdict::NotWorked && !last {
                        failure = Some(FailureContext::new(attempt + 1, &log, digest)?);
                        continue;
                    }
                    return self.finalize(step, verdict, None, limitation);
                }
                AttemptOutcome::NoScripts { message } => {
                    self.end_attempt(step, attempt, Verdict::NotWorked, Some(message.clone()))?;
                    if !last {
                        failure = Some(FailureContext::new(attempt + 1, &message, scripts_digest([]))?);
                        continue;
                    }
                    return self.finalize(step, Verdict::NotWorked, Some(message), None);
                }
                AttemptOutcome::Rejected { reason } => {
                    let note = if reason.is_empty() {
                        REJECTED_ANNOTATION.to_string()
                    } else {
                        format!("{REJECTED_ANNOTATION}: {reason}")
                    };
                    self.end_attempt(step, attempt, Verdict::NotWorked, Some(note.clone()))?;
                    return self.finalize(step, Verdict::NotWorked, Some(note), None);
                }
                AttemptOutcome::ProviderFailed { message } => {
                    let note = format!("provider error: {message}");
                    self.end_attempt(step, attempt, Verdict::NotWorked, Some(note.clone()))?;
                    return self.finalize(step, Verdict::NotWorked, Some(note), None);
                }
            }
        }
        unreachable!("attempt loop always finalizes")
    }

    fn attempt(&self, session: &mut dyn DeviceSession, step: &PlanStep, prompt: &Prompt) -> Result<AttemptOutcome, EngineError> {
        let gate = &*self.engine.gate;
        let policy = &self.campaign.policy;
        let response = match self.gateway.complete(prompt) {
            Ok(r) => r,
            Err(LlmError::EmptyCompletion) => {
                return Ok(AttemptOutcome::NoScripts { message: "provider returned an empty completion".into() })
            }
            Err(e) => return Ok(AttemptOutcome::ProviderFailed { message: e.to_string() }),
        };
        let mut scripts = match extract_scripts(&response, step, prompt.attempt) {
            Ok(s) => s,
            Err(e) => return Ok(AttemptOutcome::NoScripts { message: format!("no fenced code blocks: {e}") }),
        };
        let executable = scripts.iter().any(|s| s.interpreter.is_executable());
        let has_validation = scripts.iter().any(|s| s.interpreter.is_executable() && s.kind == ScriptKind::Validation);
        if executable && !has_validation {
            let index = scripts.len();
            scripts.push(validation_script(step, &self.session_id, prompt.attempt, index)?);
        }
        for s in &scripts {
            gate.register(s);
            self.writer.emit(RunEvent::ScriptGenerated { device: self.device.clone(), script: s.clone() })?;
        }
        if !executable {
            return Ok(AttemptOutcome::Finished {
                verdict: Verdict::NotWorked,
                log: "the completion contained no executable (bash, sh or adb) script blocks".into(),
                digest: scripts_digest(scripts.iter().map(|s| s.body.as_str())),
                limitation: None,
            });
        }
        let mut pending: Vec<GeneratedScript> = scripts.into_iter().filter(|s| s.interpreter.is_executable()).collect();
        let digest = scripts_digest(pending.iter().map(|s| s.body.as_str()));

        for s in pending.iter_mut() {
            if let ScreenOutcome::Denied { rule_id } = gate.screen(s, policy) {
                self.writer.emit(RunEvent::ScriptDenied {
                    device: self.device.clone(),
                    script_key: script_key(s),
                    rule_id: rule_id.clone(),
                })?;
                return Ok(AttemptOutcome::Finished {
                    verdict: Verdict::NotWorked,
                    log: format!("script block {} was refused by policy rule `{rule_id}` and nothing ran", s.source.block_index),
                    digest,
                    limitation: None,
                });
            }
        }

        let mut approved = Vec::with_capacity(pending.len());
        for mut s in pending {
            if gate.try_auto_approve(&mut s, policy) {
                self.writer.emit(RunEvent::ScriptAutoApproved { device: self.device.clone(), script_key: script_key(&s) })?;
                approved.push(s);
                continue;
            }
            let ticket = gate.request_approval(&s, policy.clone())?;
            self.writer.emit(RunEvent::ApprovalRequested { device: self.device.clone(), ticket: ticket.clone() })?;
            self.engine.operator.on_ticket(gate, &ticket, &s);
            let decided = match gate.wait_for_decision(&ticket.ticket_id, &self.engine.abort) {
                Ok(t) => t,
                Err(ApprovalError::Aborted(_)) => return Err(EngineError::Aborted),
                Err(e) => return Err(e.into()),
            };
            let version = match &decided.decision {
                Some(TicketDecision::Approved { version, .. }) => *version,
                _ => decided.version,
            };
            let script = gate.script(&decided.lineage_key, version).unwrap_or(s);
            self.writer.emit(RunEvent::ApprovalResolved {
                device: self.device.clone(),
                ticket: decided.clone(),
                script: script.clone(),
            })?;
            match decided.decision {
                Some(TicketDecision::Rejected { reason, .. }) => return Ok(AttemptOutcome::Rejected { reason }),
                _ => approved.push(script),
            }
        }

        let (validations, actions): (Vec<_>, Vec<_>) = approved.into_iter().partition(|s| s.kind == ScriptKind::Validation);
        let mut results = Vec::new();
        let mut detections = Vec::new();
        let mut validation_result = None;
        let mut limitation = None;
        let mut log = String::new();
        for s in actions.iter().chain(&validations) {
            let wrapped = ApprovedScript::new(s).map_err(|source| EngineError::Device {
                index: self.index,
                endpoint: self.device.clone(),
                source,
            })?;
            let (result, detection) = match session.run_script(&wrapped, step, self.engine.exec_timeout) {
                Ok(out) => {
                    if out.limitation.is_some() {
                        limitation = out.limitation.clone();
                    }
                    (out.result, out.detection)
                }
                Err(e) => (
                    ShellResult { exit_code: -1, stdout: String::new(), stderr: e.to_string(), duration_ms: 0 },
                    None,
                ),
            };
            log.push_str(&format!("$ {}\n", s.body.lines().next().unwrap_or("")));
            for part in [&result.stdout, &result.stderr] {
                if !part.is_empty() {
                    log.push_str(part);
                    log.push('\n');
                }
            }
            log.push_str(&format!("[exit {}]\n", result.exit_code));
            self.writer.emit(RunEvent::ShellExecuted {
                device: self.device.clone(),
                step_id: step.id.clone(),
                attempt: prompt.attempt,
                execution: Execution {
                    script_key: script_key(s),
                    script_id: s.script_id.clone(),
                    kind: s.kind,
                    result: result.clone(),
                    detection: detection.clone(),
                },
            })?;
            if s.kind == ScriptKind::Validation {
                validation_result = Some(result.clone());
            }
            results.push(result);
            if let Some(d) = detection {
                detections.push(d);
                break;
            }
        }
        let verdict = evaluate_verdict(step, &results, validation_result.as_ref(), &detections);
        Ok(AttemptOutcome::Finished { verdict, log, digest, limitation })
    }
}
