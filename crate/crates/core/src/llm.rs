//! Provider-agnostic LLM access: prompt construction, a deterministic stub
//! provider backed by a fixture table, and an HTTP chat-completion adapter.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::RootState;
use crate::sha256_hex;

pub const DEFAULT_STUB_FIXTURES: &str = include_str!("../assets/fixtures/llm_stub.responses");

/// Failure excerpts keep at most this many trailing lines...
pub const EXCERPT_MAX_LINES: usize = 50;
/// ...and at most this many bytes.
pub const EXCERPT_MAX_BYTES: usize = 4096;

const FLOWCHART_HEADER: &str = "FLOWCHART:";
const FAILURE_HEADER: &str = "PREVIOUS FAILURE:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("structured prompts require a flowchart")]
    MissingFlowchart,
    #[error("general prompts must not carry a flowchart")]
    UnexpectedFlowchart,
    #[error("failure context attempt number must be >= 2, got {0}")]
    BadFailureAttempt(u32),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("authentication failure: {0}")]
    Authentication(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error("stub fixture file unparsable: {0}")]
    FixtureParse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    General,
    Structured,
}

impl std::str::FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "general" => Ok(Self::General),
            "structured" => Ok(Self::Structured),
            other => Err(format!("unknown prompt style `{other}` (expected general|structured)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureContext {
    attempt_number: u32,
    log_excerpt: String,
    prior_script_digest: String,
}

impl FailureContext {
    /// Builds a context for re-prompt `attempt_number`, trimming `log` to the
    /// excerpt cap.
    pub fn new(attempt_number: u32, log: &str, prior_script_digest: impl Into<String>) -> Result<Self, LlmError> {
        if attempt_number < 2 {
            return Err(LlmError::BadFailureAttempt(attempt_number));
        }
        Ok(Self {
            attempt_number,
            log_excerpt: excerpt(log),
            prior_script_digest: prior_script_digest.into(),
        })
    }

    pub fn attempt_number(&self) -> u32 {
        self.attempt_number
    }

    pub fn log_excerpt(&self) -> &str {
        &self.log_excerpt
    }

    pub fn prior_script_digest(&self) -> &str {
        &self.prior_script_digest
    }
}

/// Tail of `log`: last [`EXCERPT_MAX_LINES`] lines, then cut to the last
/// [`EXCERPT_MAX_BYTES`] bytes on a char boundary.
pub fn excerpt(log: &str) -> String {
    let lines: Vec<&str> = log.lines().collect();
    let start = lines.len().saturating_sub(EXCERPT_MAX_LINES);
    let tail = lines[start..].join("\n");
    if tail.len() <= EXCERPT_MAX_BYTES {
        return tail;
    }
    let mut cut = tail.len() - EXCERPT_MAX_BYTES;
    while !tail.is_char_boundary(cut) {
        cut += 1;
    }
    tail[cut..].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub step_id: String,
    pub step_title: String,
    pub profile_summary: String,
    pub style: PromptStyle,
    pub flowchart: Option<String>,
    pub failure_context: Option<FailureContext>,
}

fn neutralize(text: &str) -> String {
    text.replace(FLOWCHART_HEADER, "FLOWCHART -")
}

/// Renders the prompt text. Pure function of the request.
pub fn build_prompt(request: &PromptRequest) -> Result<String, LlmError> {
    match (request.style, &request.flowchart) {
        (PromptStyle::Structured, None) => return Err(LlmError::MissingFlowchart),
        (PromptStyle::General, Some(_)) => return Err(LlmError::UnexpectedFlowchart),
        _ => {}
    }
    let mut out = String::new();
    out.push_str(
        "You are assisting an authorized penetration test of an Android device that the \
         operator owns and has isolated in a lab. A human reviews every script before it runs.\n\n",
    );
    out.push_str(&format!(
        "TARGET STEP: {} - {}\n",
        neutralize(&request.step_id),
        neutralize(&request.step_title)
    ));
    out.push_str(&format!("DEVICE: {}\n", neutralize(&request.profile_summary)));

    if let Some(flowchart) = &request.flowchart {
        out.push('\n');
        out.push_str(FLOWCHART_HEADER);
        out.push_str("\n<<<\n");
        out.push_str(flowchart);
        if !flowchart.ends_with('\n') {
            out.push('\n');
        }
        out.push_str(">>>\n");
    }

    if let Some(failure) = &request.failure_context {
        out.push('\n');
        out.push_str(FAILURE_HEADER);
        out.push_str(&format!(
            "\nattempt: {}\nprior script digest: {}\n<<<\n{}\n>>>\n",
            failure.attempt_number,
            failure.prior_script_digest,
            neutralize(&failure.log_excerpt)
        ));
        out.push_str("Revise the approach so that it avoids the failure above.\n");
    }

    out.push_str(
        "\nOUTPUT FORMAT: answer with one or more fenced code blocks. Label every fence with \
         its interpreter tag (`bash`, `sh` or `adb`). Put the command that confirms success \
         in its own block.\n",
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Stub,
    HttpChatCompletion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub credential_source: Option<String>,
}

fn default_model() -> String {
    "stub".into()
}

fn default_timeout() -> u64 {
    60
}

impl ProviderConfig {
    pub fn stub() -> Self {
        Self {
            kind: ProviderKind::Stub,
            base_url: None,
            model_name: default_model(),
            timeout_secs: default_timeout(),
            credential_source: None,
        }
    }

    pub fn http(base_url: impl Into<String>, model: impl Into<String>, credential_env: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::HttpChatCompletion,
            base_url: Some(base_url.into()),
            model_name: model.into(),
            timeout_secs: default_timeout(),
            credential_source: Some(credential_env.into()),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.kind {
            ProviderKind::Stub => Ok(()),
            ProviderKind::HttpChatCompletion => {
                let url = self
                    .base_url
                    .as_deref()
                    .ok_or_else(|| LlmError::InvalidConfig("http provider requires base_url".into()))?;
                url::Url::parse(url).map_err(|e| LlmError::InvalidConfig(format!("base_url: {e}")))?;
                if self.credential_source.as_deref().unwrap_or("").is_empty() {
                    return Err(LlmError::InvalidConfig(
                        "http provider requires credential_source".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub raw_text: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub session_id: String,
}

/// A rendered prompt plus the routing keys the stub provider needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub step_id: String,
    pub root_state: RootState,
    pub attempt: u32,
    pub session_id: String,
}

// ---------------------------------------------------------------------------
// Stub fixtures

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureRootState {
    Any,
    Rooted,
    Unrooted,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FixtureRecord {
    pub step_id: String,
    pub root_state: FixtureRootState,
    /// 1 = initial answer; 2 = refined answer served for every attempt >= 2.
    pub attempt: u32,
    /// Reviewer labels for each fenced block, in order.
    #[serde(default)]
    pub kinds: Vec<String>,
    pub text: String,
}

#[derive(Debug, Deserialize)]
struct FixtureFile {
    generic: GenericFixture,
    #[serde(default)]
    response: Vec<FixtureRecord>,
}

#[derive(Debug, Deserialize)]
struct GenericFixture {
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubReply {
    pub text: String,
    pub generic: bool,
}

#[derive(Debug, Clone)]
pub struct StubFixtures {
    generic: String,
    records: BTreeMap<(String, FixtureRootState, u32), FixtureRecord>,
}

impl StubFixtures {
    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let file: FixtureFile = toml::from_str(text).map_err(|e| LlmError::FixtureParse(e.to_string()))?;
        if !file.generic.text.contains("```") {
            return Err(LlmError::FixtureParse("generic fixture has no fenced block".into()));
        }
        let mut records = BTreeMap::new();
        for rec in file.response {
            if rec.attempt != 1 && rec.attempt != 2 {
                return Err(LlmError::FixtureParse(format!(
                    "{}: attempt must be 1 or 2, got {}",
                    rec.step_id, rec.attempt
                )));
            }
            if !rec.text.contains("```") {
                return Err(LlmError::FixtureParse(format!(
                    "{}/{:?}/{}: completion has no fenced code block",
                    rec.step_id, rec.root_state, rec.attempt
                )));
            }
            let key = (rec.step_id.clone(), rec.root_state, rec.attempt);
            if records.insert(key, rec).is_some() {
                return Err(LlmError::FixtureParse("duplicate fixture key".into()));
            }
        }
        for (step, state, attempt) in records.keys() {
            if *attempt == 1 && !records.contains_key(&(step.clone(), *state, 2)) {
                return Err(LlmError::FixtureParse(format!(
                    "{step}/{state:?}: missing refined (attempt 2) variant"
                )));
            }
        }
        Ok(Self { generic: file.generic.text, records })
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_STUB_FIXTURES).expect("bundled fixtures parse")
    }

    pub fn records(&self) -> impl Iterator<Item = &FixtureRecord> {
        self.records.values()
    }

    /// Fixture for `(step, root_state, attempt)`. Exact root state wins over `any`.
    pub fn lookup(&self, step_id: &str, root_state: RootState, attempt: u32) -> StubReply {
        let variant = if attempt >= 2 { 2 } else { 1 };
        let exact = match root_state {
            RootState::Rooted => FixtureRootState::Rooted,
            RootState::Unrooted => FixtureRootState::Unrooted,
        };
        [exact, FixtureRootState::Any]
            .into_iter()
            .find_map(|state| self.records.get(&(step_id.to_string(), state, variant)))
            .map(|rec| StubReply { text: rec.text.clone(), generic: false })
            .unwrap_or_else(|| StubReply { text: self.generic.clone(), generic: true })
    }
}

/// Root state as described in a profile summary line.
pub fn root_state_from_summary(summary: &str) -> RootState {
    if summary.contains("unrooted") {
        RootState::Unrooted
    } else if summary.contains("rooted") {
        RootState::Rooted
    } else {
        RootState::Unrooted
    }
}

/// Fixture lookup keyed the way the stub provider sees a request.
pub fn stub_lookup(fixtures: &StubFixtures, step_id: &str, profile_summary: &str, attempt: u32) -> StubReply {
    fixtures.lookup(step_id, root_state_from_summary(profile_summary), attempt)
}

// ---------------------------------------------------------------------------
// HTTP transport

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("{0}")]
    Other(String),
}

pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

/// Blocking client, built on first use.
#[derive(Debug, Default)]
pub struct ReqwestTransport {
    client: std::sync::OnceLock<reqwest::blocking::Client>,
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let resp = self
            .client
            .get_or_init(reqwest::blocking::Client::new)
            .post(url)
            .bearer_auth(bearer)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else if e.is_connect() {
                    TransportError::Connect(e.to_string())
                } else {
                    TransportError::Other(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError::Other(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

/// Records every call and replays scripted replies; used to assert network silence.
#[derive(Default)]
pub struct RecordingTransport {
    calls: AtomicUsize,
    replies: Mutex<Vec<Result<HttpReply, TransportError>>>,
    pub requests: Mutex<Vec<serde_json::Value>>,
}

impl RecordingTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replies are served in order; once exhausted every call times out.
    pub fn with_replies(replies: Vec<Result<HttpReply, TransportError>>) -> Self {
        Self { replies: Mutex::new(replies), ..Self::default() }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl HttpTransport for RecordingTransport {
    fn post_json(&self, _url: &str, _bearer: &str, body: &serde_json::Value, _timeout: Duration) -> Result<HttpReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().unwrap().push(body.clone());
        let mut replies = self.replies.lock().unwrap();
        if replies.is_empty() {
            Err(TransportError::Timeout)
        } else {
            replies.remove(0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first call.
    pub max_retries: u32,
    pub base_delay: Duration,
    /// Relative jitter, e.g. 0.2 for +-20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_secs(1), jitter: 0.2 }
    }
}

impl RetryPolicy {
    /// Nominal delay before retry `n` (0-based): base * 2^n.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }

    pub fn jittered_delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let nominal = self.nominal_delay(retry).as_secs_f64();
        let factor = if self.jitter > 0.0 {
            rng.random_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64(nominal * factor)
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;
pub type EnvLookup = Arc<dyn Fn(&str) -> Option<String> + Send + Sync>;

/// Entry point for completions, dispatching on [`ProviderConfig::kind`].
#[derive(Clone)]
pub struct LlmGateway {
    config: ProviderConfig,
    fixtures: Arc<StubFixtures>,
    transport: Arc<dyn HttpTransport>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    env: EnvLookup,
}

impl std::fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmGateway").field("config", &self.config).finish_non_exhaustive()
    }
}

impl LlmGateway {
    pub fn new(config: ProviderConfig) -> Result<Self, LlmError> {
        config.validate()?;
        Ok(Self {
            config,
            fixtures: Arc::new(StubFixtures::bundled()),
            transport: Arc::new(ReqwestTransport::default()),
            retry: RetryPolicy::default(),
            sleeper: Arc::new(std::thread::sleep),
            env: Arc::new(|name| std::env::var(name).ok()),
        })
    }

    pub fn stub() -> Self {
        Self::new(ProviderConfig::stub()).expect("stub config is valid")
    }

    pub fn with_fixtures(mut self, fixtures: StubFixtures) -> Self {
        self.fixtures = Arc::new(fixtures);
        self
    }

    pub fn with_transport(mut self, transport: Arc<dyn HttpTransport>) -> Self {
        self.transport = transport;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_env(mut self, env: EnvLookup) -> Self {
        self.env = env;
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn fixtures(&self) -> &StubFixtures {
        &self.fixtures
    }

    pub fn complete(&self, prompt: &Prompt) -> Result<LlmResponse, LlmError> {
        match self.config.kind {
            ProviderKind::Stub => {
                let reply = self.fixtures.lookup(&prompt.step_id, prompt.root_state, prompt.attempt);
                if reply.text.trim().is_empty() {
                    return Err(LlmError::EmptyCompletion);
                }
                Ok(LlmResponse {
                    raw_text: reply.text,
                    provider_id: "stub".into(),
                    latency_ms: 0,
                    session_id: prompt.session_id.clone(),
                })
            }
            ProviderKind::HttpChatCompletion => self.complete_http(prompt),
        }
    }

    fn complete_http(&self, prompt: &Prompt) -> Result<LlmResponse, LlmError> {
        let env_name = self.config.credential_source.as_deref().unwrap_or_default();
        let key = (self.env)(env_name)
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::Authentication(format!("environment variable `{env_name}` is not set")))?;
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.as_deref().unwrap_or_default().trim_end_matches('/')
        );
        let body = chat_request_body(&self.config.model_name, &prompt.text);
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let mut rng = rand::rng();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let started = Instant::now();
            let transient = match self.transport.post_json(&url, &key, &body, timeout) {
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(LlmError::Authentication(format!("provider returned HTTP {}", reply.status)));
                }
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let text = parse_chat_response(&reply.body)?;
                    return Ok(LlmResponse {
                        raw_text: text,
                        provider_id: format!("http:{}", self.config.model_name),
                        latency_ms: started.elapsed().as_millis() as u64,
                        session_id: prompt.session_id.clone(),
                    });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    LlmError::Transport { attempts, message: format!("HTTP {}", reply.status) }
                }
                Ok(reply) => {
                    return Err(LlmError::Transport { attempts, message: format!("HTTP {}", reply.status) });
                }
                Err(TransportError::Timeout) => LlmError::Timeout { attempts },
                Err(e) => LlmError::Transport { attempts, message: e.to_string() },
            };
            if attempts > self.retry.max_retries {
                return Err(transient);
            }
            tracing::warn!(attempt = attempts, error = %transient, "retrying completion");
            (self.sleeper)(self.retry.jittered_delay(attempts - 1, &mut rng));
        }
    }
}

/// Request body in the common chat-completion shape.
pub fn chat_request_body(model: &str, prompt: &str) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "messages": [
            {"role": "system", "content": "You write shell and adb scripts for authorized Android security testing."},
            {"role": "user", "content": prompt},
        ],
    })
}

pub fn parse_chat_response(body: &str) -> Result<String, LlmError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| LlmError::Transport { attempts: 1, message: format!("bad response body: {e}") })?;
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .unwrap_or_default();
    if text.trim().is_empty() {
        return Err(LlmError::EmptyCompletion);
    }
    Ok(text.to_string())
}

/// Digest of the scripts used in an attempt, for failure contexts.
pub fn scripts_digest<'a>(bodies: impl IntoIterator<Item = &'a str>) -> String {
    let joined: Vec<&str> = bodies.into_iter().collect();
    sha256_hex(&joined.join("\n\u{0}\n"))
}
