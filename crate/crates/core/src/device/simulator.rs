//! Spec-driven device simulator.
//!
//! The simulator does not interpret scripts. It dispatches on the step
//! category attached to a command and answers with the canned outcome from
//! the profile's spec file. Action scripts are recognized by the category's
//! feature tag (a substring such as `sideload`); an action without the tag
//! has no effect and fails.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use serde::Deserialize;

use super::{DetectionEvent, DeviceEndpoint, DeviceError, DeviceSession, ExecOutcome, ExecRequest, ShellResult};
use crate::plan::{DeviceProfile, PlanStep, SecurityMechanism, StepCategory, Verdict};
use crate::script::{ApprovalState, GeneratedScript, ScriptKind};
use crate::sha256_hex;

pub const BUNDLED_SPECS: [(&str, &str); 4] = [
    ("android-13-unrooted", include_str!("../../assets/sim/android-13-unrooted.spec")),
    ("android-11-rooted", include_str!("../../assets/sim/android-11-rooted.spec")),
    ("android-12-rooted", include_str!("../../assets/sim/android-12-rooted.spec")),
    ("android-14-unrooted", include_str!("../../assets/sim/android-14-unrooted.spec")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTemplate {
    Worked,
    NotWorked,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Behavior {
    pub category: StepCategory,
    pub outcome: OutcomeTemplate,
    pub feature_tag: String,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub validation_stdout: String,
    /// Emulation limit that explains a `not_worked` outcome.
    #[serde(default)]
    pub limitation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct CannedCommand {
    pub prefix: String,
    pub exit_code: i32,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum LatencyModel {
    Fixed { fixed_ms: u64 },
    Uniform { min_ms: u64, max_ms: u64 },
}

impl LatencyModel {
    /// Deterministic per command.
    fn sample(&self, command: &str) -> u64 {
        match *self {
            Self::Fixed { fixed_ms } => fixed_ms,
            Self::Uniform { min_ms, max_ms } => {
                let span = max_ms.saturating_sub(min_ms) + 1;
                let h = sha256_hex(command);
                let n = u64::from_str_radix(&h[..12], 16).unwrap_or(0);
                min_ms + n % span
            }
        }
    }
}

#[derive(Deserialize)]
struct SpecFile {
    profile: DeviceProfile,
    latency: LatencyModel,
    #[serde(default)]
    detection: BTreeMap<String, SecurityMechanism>,
    behavior: Vec<Behavior>,
    #[serde(default)]
    command: Vec<CannedCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatorSpec {
    pub profile: DeviceProfile,
    pub behavior: BTreeMap<StepCategory, Behavior>,
    pub latency: LatencyModel,
    pub detection: BTreeMap<StepCategory, SecurityMechanism>,
    pub commands: Vec<CannedCommand>,
}

/// Canned answer for one step on one profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatedOutcome {
    pub result: ShellResult,
    pub detection: Option<DetectionEvent>,
    pub template: Verdict,
    pub limitation: Option<String>,
}

impl SimulatorSpec {
    pub fn parse(text: &str) -> Result<Self, DeviceError> {
        let file: SpecFile = toml::from_str(text).map_err(|e| DeviceError::Spec(e.to_string()))?;
        file.profile.validate().map_err(|e| DeviceError::Spec(e.to_string()))?;
        let mut behavior = BTreeMap::new();
        for b in file.behavior {
            if b.feature_tag.is_empty() {
                return Err(DeviceError::Spec(format!("{}: empty feature_tag", b.category)));
            }
            if behavior.insert(b.category, b.clone()).is_some() {
                return Err(DeviceError::Spec(format!("duplicate behavior for {}", b.category)));
            }
        }
        if let Some(missing) = StepCategory::ALL.iter().find(|c| !behavior.contains_key(c)) {
            return Err(DeviceError::Spec(format!(
                "{}: behavior table has no entry for {missing}",
                file.profile.name
            )));
        }
        let mut detection = BTreeMap::new();
        for (key, mechanism) in file.detection {
            let category = StepCategory::parse(&key)
                .ok_or_else(|| DeviceError::Spec(format!("detection: unknown category `{key}`")))?;
            if !file.profile.security_mechanisms.contains(&mechanism) {
                return Err(DeviceError::Spec(format!(
                    "detection for {category} uses {mechanism}, which the profile does not run"
                )));
            }
            detection.insert(category, mechanism);
        }
        Ok(Self {
            profile: file.profile,
            behavior,
            latency: file.latency,
            detection,
            commands: file.command,
        })
    }

    fn behavior(&self, category: StepCategory) -> Result<&Behavior, DeviceError> {
        self.behavior.get(&category).ok_or(DeviceError::NoBehavior(category))
    }

    /// Answer for a command tagged with `category`. `kind = None` is a plain probe
    /// and is answered like a validation script.
    fn respond(&self, category: StepCategory, step_id: &str, kind: Option<ScriptKind>, command: &str) -> Result<SimulatedOutcome, DeviceError> {
        let b = self.behavior(category)?;
        let detected = self.detection.get(&category).copied();
        let duration_ms = self.latency.sample(command);
        let is_action = matches!(kind, Some(ScriptKind::Rooting | ScriptKind::Exploit));
        let template = match (detected, b.outcome) {
            (None, OutcomeTemplate::Worked) => Verdict::Worked,
            _ => Verdict::NotWorked,
        };
        let fail = |stderr: String| ShellResult { exit_code: 1, stdout: String::new(), stderr, duration_ms };

        let (result, detection) = if is_action {
            if !command.contains(&b.feature_tag) {
                (fail(format!("{category}: command had no effect on the device")), None)
            } else if let Some(mechanism) = detected {
                let event = DetectionEvent { mechanism, step_id: step_id.to_string(), timestamp: Utc::now() };
                (fail(b.stderr.clone()), Some(event))
            } else if b.outcome == OutcomeTemplate::Worked {
                (ShellResult { exit_code: 0, stdout: b.stdout.clone(), stderr: b.stderr.clone(), duration_ms }, None)
            } else {
                (fail(b.stderr.clone()), None)
            }
        } else if template == Verdict::Worked {
            (ShellResult { exit_code: 0, stdout: b.validation_stdout.clone(), stderr: String::new(), duration_ms }, None)
        } else {
            (fail(b.stderr.clone()), None)
        };
        Ok(SimulatedOutcome { result, detection, template, limitation: b.limitation.clone() })
    }

    /// Answer for an untagged command: first matching canned command, else a
    /// silent success.
    fn respond_untagged(&self, command: &str) -> ShellResult {
        let first = command
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or("");
        let line = first.strip_prefix("adb shell ").unwrap_or(first);
        let duration_ms = self.latency.sample(command);
        self.commands
            .iter()
            .find(|c| line == c.prefix || line.starts_with(&format!("{} ", c.prefix)))
            .map(|c| ShellResult {
                exit_code: c.exit_code,
                stdout: c.stdout.clone(),
                stderr: c.stderr.clone(),
                duration_ms,
            })
            .unwrap_or(ShellResult { exit_code: 0, stdout: String::new(), stderr: String::new(), duration_ms })
    }
}

pub fn default_specs() -> Vec<SimulatorSpec> {
    BUNDLED_SPECS
        .iter()
        .map(|(name, text)| SimulatorSpec::parse(text).unwrap_or_else(|e| panic!("bundled spec {name}: {e}")))
        .collect()
}

/// Canned outcome of running `script` for `step` on the simulated profile.
pub fn simulate_step(spec: &SimulatorSpec, step: &PlanStep, script: &GeneratedScript) -> Result<SimulatedOutcome, DeviceError> {
    if script.approval_state != ApprovalState::Approved {
        return Err(DeviceError::Unapproved(script.script_id.clone()));
    }
    spec.respond(step.category, &step.id, Some(script.kind), &script.body)
}

pub struct SimulatorSession {
    endpoint: DeviceEndpoint,
    spec: Arc<SimulatorSpec>,
}

impl SimulatorSession {
    pub fn new(endpoint: DeviceEndpoint, spec: Arc<SimulatorSpec>) -> Self {
        Self { endpoint, spec }
    }
}

impl DeviceSession for SimulatorSession {
    fn endpoint(&self) -> &DeviceEndpoint {
        &self.endpoint
    }

    fn exec_shell(&mut self, request: &ExecRequest, timeout: Duration) -> Result<ExecOutcome, DeviceError> {
        if timeout.is_zero() {
            return Err(DeviceError::Timeout(timeout));
        }
        match request.category {
            Some(category) => {
                let step_id = request.step_id.as_deref().unwrap_or(category.as_str());
                let out = self.spec.respond(category, step_id, request.kind, &request.command)?;
                if Duration::from_millis(out.result.duration_ms) > timeout {
                    return Err(DeviceError::Timeout(timeout));
                }
                Ok(ExecOutcome { result: out.result, detection: out.detection, limitation: out.limitation })
            }
            None => Ok(ExecOutcome {
                result: self.spec.respond_untagged(&request.command),
                detection: None,
                limitation: None,
            }),
        }
    }
}
