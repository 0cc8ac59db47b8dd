//! Device control: real targets over the ADB host protocol or a host `adb`
//! binary, and simulated targets driven by spec files.

pub mod adb;
pub mod protocol;
pub mod simulator;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{DeviceProfile, PlanStep, SecurityMechanism, StepCategory};
use crate::script::{ApprovalState, GeneratedScript, Interpreter, ScriptKind};

pub use protocol::{frame_request, parse_reply, AdbReply, ProtocolError};
pub use simulator::{SimulatorSpec, SimulatedOutcome};

pub const DEFAULT_ADB_HOST: &str = "127.0.0.1";
pub const DEFAULT_ADB_PORT: u16 = 5037;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("command timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport disconnected: {0}")]
    Disconnected(String),
    #[error("adb server unreachable at {0}")]
    Unreachable(String),
    #[error("unknown simulated profile `{0}`")]
    UnknownProfile(String),
    #[error("no device profile registered for `{0}`")]
    MissingProfile(String),
    #[error("adb server refused: {0}")]
    Refused(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("script {0} is not approved")]
    Unapproved(String),
    #[error("script interpreter {0:?} is not executable")]
    NotExecutable(Interpreter),
    #[error("unsupported command for this adapter: {0}")]
    Unsupported(String),
    #[error("invalid endpoint `{0}`")]
    BadEndpoint(String),
    #[error("simulator spec: {0}")]
    Spec(String),
    #[error("no behavior for category `{0}`")]
    NoBehavior(StepCategory),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeviceEndpoint {
    Simulated { profile: String },
    AdbServer { host: String, port: u16, serial: String },
    AdbCli { serial: String },
}

impl DeviceEndpoint {
    pub fn simulated(profile: impl Into<String>) -> Self {
        Self::Simulated { profile: profile.into() }
    }

    pub fn is_real(&self) -> bool {
        !matches!(self, Self::Simulated { .. })
    }
}

impl fmt::Display for DeviceEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Simulated { profile } => write!(f, "sim:{profile}"),
            Self::AdbServer { host, port, serial } => write!(f, "adb://{host}:{port}/{serial}"),
            Self::AdbCli { serial } => write!(f, "adbcli:{serial}"),
        }
    }
}

impl FromStr for DeviceEndpoint {
    type Err = DeviceError;

    /// Accepts `sim:<profile>`, a bare profile name, `adb://host:port/serial`
    /// and `adbcli:<serial>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DeviceError::BadEndpoint(s.to_string());
        if let Some(rest) = s.strip_prefix("adb://") {
            let (addr, serial) = rest.split_once('/').ok_or_else(bad)?;
            let (host, port) = match addr.rsplit_once(':') {
                Some((h, p)) => (h.to_string(), p.parse().map_err(|_| bad())?),
                None => (addr.to_string(), DEFAULT_ADB_PORT),
            };
            if host.is_empty() || serial.is_empty() {
                return Err(bad());
            }
            return Ok(Self::AdbServer { host, port, serial: serial.to_string() });
        }
        if let Some(serial) = s.strip_prefix("adbcli:") {
            if serial.is_empty() {
                return Err(bad());
            }
            return Ok(Self::AdbCli { serial: serial.to_string() });
        }
        let profile = s.strip_prefix("sim:").unwrap_or(s);
        if profile.is_empty() || profile.contains(char::is_whitespace) {
            return Err(bad());
        }
        Ok(Self::simulated(profile))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShellResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub mechanism: SecurityMechanism,
    pub step_id: String,
    pub timestamp: DateTime<Utc>,
}

/// What one command produced on a device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub result: ShellResult,
    pub detection: Option<DetectionEvent>,
    /// Set by the simulator when the outcome reflects an emulation limit
    /// rather than the script.
    pub limitation: Option<String>,
}

/// A shell command plus the optional step context the simulator dispatches on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRequest {
    pub command: String,
    pub interpreter: Interpreter,
    pub step_id: Option<String>,
    pub category: Option<StepCategory>,
    pub kind: Option<ScriptKind>,
}

impl ExecRequest {
    pub fn raw(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            interpreter: Interpreter::Shell,
            step_id: None,
            category: None,
            kind: None,
        }
    }

    pub fn tagged(command: impl Into<String>, step: &PlanStep, kind: ScriptKind) -> Self {
        Self {
            command: command.into(),
            interpreter: Interpreter::Shell,
            step_id: Some(step.id.clone()),
            category: Some(step.category),
            kind: Some(kind),
        }
    }
}

/// A script that passed the approval gate. Adapters accept nothing else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApprovedScript(GeneratedScript);

impl ApprovedScript {
    pub fn new(script: &GeneratedScript) -> Result<Self, DeviceError> {
        if script.approval_state != ApprovalState::Approved {
            return Err(DeviceError::Unapproved(script.script_id.clone()));
        }
        if !script.interpreter.is_executable() {
            return Err(DeviceError::NotExecutable(script.interpreter));
        }
        Ok(Self(script.clone()))
    }

    pub fn script(&self) -> &GeneratedScript {
        &self.0
    }
}

/// One sequential connection to a device.
pub trait DeviceSession: Send {
    fn endpoint(&self) -> &DeviceEndpoint;

    fn exec_shell(&mut self, request: &ExecRequest, timeout: Duration) -> Result<ExecOutcome, DeviceError>;

    fn run_script(&mut self, script: &ApprovedScript, step: &PlanStep, timeout: Duration) -> Result<ExecOutcome, DeviceError> {
        let s = script.script();
        let mut request = ExecRequest::tagged(s.body.clone(), step, s.kind);
        request.interpreter = s.interpreter;
        self.exec_shell(&request, timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub serial: String,
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointFamily {
    Simulator,
    AdbServer { host: String, port: u16 },
    AdbCli,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecRecord {
    pub endpoint: String,
    pub command: String,
}

/// Counts real-transport connection attempts and every command that reaches
/// any adapter.
#[derive(Debug, Default)]
pub struct TransportRecorder {
    connections: AtomicUsize,
    executions: Mutex<Vec<ExecRecord>>,
}

impl TransportRecorder {
    pub fn connection_attempts(&self) -> usize {
        self.connections.load(Ordering::SeqCst)
    }

    pub fn executions(&self) -> Vec<ExecRecord> {
        self.executions.lock().unwrap().clone()
    }

    pub(crate) fn record_connect(&self) {
        self.connections.fetch_add(1, Ordering::SeqCst);
    }

    fn record_exec(&self, endpoint: &DeviceEndpoint, command: &str) {
        self.executions.lock().unwrap().push(ExecRecord {
            endpoint: endpoint.to_string(),
            command: command.to_string(),
        });
    }
}

struct RecordedSession {
    inner: Box<dyn DeviceSession>,
    recorder: Arc<TransportRecorder>,
}

impl DeviceSession for RecordedSession {
    fn endpoint(&self) -> &DeviceEndpoint {
        self.inner.endpoint()
    }

    fn exec_shell(&mut self, request: &ExecRequest, timeout: Duration) -> Result<ExecOutcome, DeviceError> {
        self.recorder.record_exec(self.inner.endpoint(), &request.command);
        self.inner.exec_shell(request, timeout)
    }
}

/// Registry of simulator specs and real-device profiles; opens sessions.
#[derive(Debug, Clone)]
pub struct DeviceHub {
    sims: BTreeMap<String, Arc<SimulatorSpec>>,
    real_profiles: BTreeMap<String, DeviceProfile>,
    adb_binary: PathBuf,
    connect_timeout: Duration,
    recorder: Arc<TransportRecorder>,
}

impl Default for DeviceHub {
    fn default() -> Self {
        Self::empty()
    }
}

impl DeviceHub {
    pub fn empty() -> Self {
        Self {
            sims: BTreeMap::new(),
            real_profiles: BTreeMap::new(),
            adb_binary: PathBuf::from("adb"),
            connect_timeout: Duration::from_secs(3),
            recorder: Arc::new(TransportRecorder::default()),
        }
    }

    /// Hub with the four bundled simulator profiles.
    pub fn with_default_simulators() -> Self {
        let mut hub = Self::empty();
        for spec in simulator::default_specs() {
            hub.register_simulator(spec);
        }
        hub
    }

    pub fn register_simulator(&mut self, spec: SimulatorSpec) {
        self.sims.insert(spec.profile.name.clone(), Arc::new(spec));
    }

    /// Profile describing a real endpoint; used for environment gating.
    pub fn register_real_profile(&mut self, endpoint: &DeviceEndpoint, profile: DeviceProfile) {
        self.real_profiles.insert(endpoint.to_string(), profile);
    }

    pub fn set_adb_binary(&mut self, path: impl Into<PathBuf>) {
        self.adb_binary = path.into();
    }

    pub fn recorder(&self) -> Arc<TransportRecorder> {
        self.recorder.clone()
    }

    pub fn simulator(&self, name: &str) -> Option<&Arc<SimulatorSpec>> {
        self.sims.get(name)
    }

    pub fn simulator_profiles(&self) -> Vec<DeviceProfile> {
        self.sims.values().map(|s| s.profile.clone()).collect()
    }

    pub fn profile_for(&self, endpoint: &DeviceEndpoint) -> Result<DeviceProfile, DeviceError> {
        match endpoint {
            DeviceEndpoint::Simulated { profile } => self
                .sims
                .get(profile)
                .map(|s| s.profile.clone())
                .ok_or_else(|| DeviceError::UnknownProfile(profile.clone())),
            real => self
                .real_profiles
                .get(&real.to_string())
                .cloned()
                .ok_or_else(|| DeviceError::MissingProfile(real.to_string())),
        }
    }

    pub fn open_session(&self, endpoint: &DeviceEndpoint) -> Result<Box<dyn DeviceSession>, DeviceError> {
        let inner: Box<dyn DeviceSession> = match endpoint {
            DeviceEndpoint::Simulated { profile } => {
                let spec = self
                    .sims
                    .get(profile)
                    .cloned()
                    .ok_or_else(|| DeviceError::UnknownProfile(profile.clone()))?;
                Box::new(simulator::SimulatorSession::new(endpoint.clone(), spec))
            }
            DeviceEndpoint::AdbServer { host, port, serial } => Box::new(adb::AdbServerSession::new(
                endpoint.clone(),
                adb::AdbServerClient::new(host.clone(), *port, self.connect_timeout, self.recorder.clone()),
                serial.clone(),
            )),
            DeviceEndpoint::AdbCli { serial } => Box::new(adb::AdbCliSession::new(
                endpoint.clone(),
                self.adb_binary.clone(),
                serial.clone(),
                self.recorder.clone(),
            )),
        };
        Ok(Box::new(RecordedSession { inner, recorder: self.recorder.clone() }))
    }

    pub fn list_devices(&self, family: &EndpointFamily) -> Result<Vec<DeviceDescriptor>, DeviceError> {
        match family {
            EndpointFamily::Simulator => Ok(self
                .sims
                .keys()
                .map(|name| DeviceDescriptor { serial: format!("sim:{name}"), state: "device".into() })
                .collect()),
            EndpointFamily::AdbServer { host, port } => {
                adb::AdbServerClient::new(host.clone(), *port, self.connect_timeout, self.recorder.clone()).devices()
            }
            EndpointFamily::AdbCli => adb::cli_devices(&self.adb_binary, &self.recorder),
        }
    }
}

/// Runs a raw command on an endpoint through a fresh session.
pub fn exec_shell(hub: &DeviceHub, endpoint: &DeviceEndpoint, command: &str, timeout: Duration) -> Result<ShellResult, DeviceError> {
    let mut session = hub.open_session(endpoint)?;
    session.exec_shell(&ExecRequest::raw(command), timeout).map(|o| o.result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!("sim:android-11-rooted".parse::<DeviceEndpoint>().unwrap(), DeviceEndpoint::simulated("android-11-rooted"));
        assert_eq!("android-11-rooted".parse::<DeviceEndpoint>().unwrap(), DeviceEndpoint::simulated("android-11-rooted"));
        let e: DeviceEndpoint = "adb://127.0.0.1:5037/emulator-5554".parse().unwrap();
        assert_eq!(e, DeviceEndpoint::AdbServer { host: "127.0.0.1".into(), port: 5037, serial: "emulator-5554".into() });
        assert_eq!(e.to_string(), "adb://127.0.0.1:5037/emulator-5554");
        assert_eq!("adbcli:abc".parse::<DeviceEndpoint>().unwrap().to_string(), "adbcli:abc");
        assert!("adbcli:".parse::<DeviceEndpoint>().is_err());
        assert!("adb://host:99999/x".parse::<DeviceEndpoint>().is_err());
        assert!("adb://host:5037/".parse::<DeviceEndpoint>().is_err());
    }

    #[test]
    fn unapproved_scripts_cannot_be_wrapped() {
        let plan = crate::plan::canonical_plan();
        let s = crate::script::validation_script(plan.step("backup").unwrap(), "s", 1, 0).unwrap();
        assert!(matches!(ApprovedScript::new(&s), Err(DeviceError::Unapproved(_))));
        let mut ok = s.clone();
        ok.approve().unwrap();
        assert!(ApprovedScript::new(&ok).is_ok());
        let mut text = s;
        text.interpreter = Interpreter::GenericText;
        text.approve().unwrap();
        assert_eq!(ApprovedScript::new(&text), Err(DeviceError::NotExecutable(Interpreter::GenericText)));
    }

    #[test]
    fn simulator_registry_listing() {
        let hub = DeviceHub::with_default_simulators();
        let list = hub.list_devices(&EndpointFamily::Simulator).unwrap();
        assert_eq!(list.len(), 4);
        assert!(list.iter().all(|d| d.serial.starts_with("sim:")));
        assert!(DeviceHub::empty().list_devices(&EndpointFamily::Simulator).unwrap().is_empty());
    }

    #[test]
    fn unknown_profile() {
        let hub = DeviceHub::with_default_simulators();
        assert!(matches!(
            hub.open_session(&DeviceEndpoint::simulated("android-99")),
            Err(DeviceError::UnknownProfile(_))
        ));
    }
}
