//! Turns raw completions into classified script artifacts.
//!
//! Every fenced code block becomes one [`GeneratedScript`]. The fence label
//! picks the interpreter:
//!
//! | label          | interpreter   |
//! |----------------|---------------|
//! | `sh`, `bash`   | `Shell`       |
//! | `adb`          | `AdbDirect`   |
//! | anything else  | `GenericText` |
//!
//! `GenericText` (including Python) is stored for review but never executed.
//!
//! Kind classification is a pattern rule, not an understanding of the script:
//! a block is `Validation` when it contains the step's checker command or
//! greps for the step's expected marker; otherwise it is `Rooting` for
//! rooting-chain steps and `Exploit` for attack-surface steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmResponse;
use crate::plan::{AutomationLevel, PlanStep};
use crate::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScriptError {
    #[error("completion contained no fenced code blocks")]
    NoScripts,
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("script body must not be empty")]
    EmptyBody,
    #[error("cannot move script {script_id} from {from:?} to {to:?}")]
    InvalidTransition { script_id: String, from: ApprovalState, to: ApprovalState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    Rooting,
    Exploit,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpreter {
    Shell,
    AdbDirect,
    GenericText,
}

impl Interpreter {
    pub fn from_fence_label(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "sh" | "bash" => Self::Shell,
            "adb" => Self::AdbDirect,
            _ => Self::GenericText,
        }
    }

    pub fn is_executable(self) -> bool {
        !matches!(self, Self::GenericText)
    }

    pub fn fence_label(self) -> &'static str {
        match self {
            Self::Shell => "bash",
            Self::AdbDirect => "adb",
            Self::GenericText => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
}

impl RiskLevel {
    pub fn label(self) -> &'static str {
        match self {
            Self::Low => "Low Risk",
            Self::Medium => "Medium Risk",
            Self::High => "High Risk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalState {
    Pending,
    Approved,
    Rejected,
    AutoDenied,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptSource {
    pub session_id: String,
    pub step_id: String,
    pub attempt_number: u32,
    /// Position of the fenced block within the completion.
    pub block_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedScript {
    pub script_id: String,
    pub kind: ScriptKind,
    pub interpreter: Interpreter,
    pub body: String,
    pub source: ScriptSource,
    pub risk: RiskLevel,
    pub approval_state: ApprovalState,
    pub version: u32,
}

impl GeneratedScript {
    pub fn new(
        body: impl Into<String>,
        kind: ScriptKind,
        interpreter: Interpreter,
        source: ScriptSource,
        risk: RiskLevel,
    ) -> Result<Self, ScriptError> {
        let body = body.into();
        if body.trim().is_empty() {
            return Err(ScriptError::EmptyBody);
        }
        Ok(Self {
            script_id: sha256_hex(&body),
            kind,
            interpreter,
            body,
            source,
            risk,
            approval_state: ApprovalState::Pending,
            version: 1,
        })
    }

    /// Identity of the script lineage across edits: one per block of one completion.
    pub fn lineage_key(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.source.session_id, self.source.step_id, self.source.attempt_number, self.source.block_index
        )
    }

    fn transition(&mut self, allowed_from: ApprovalState, to: ApprovalState) -> Result<(), ScriptError> {
        if self.approval_state != allowed_from {
            return Err(ScriptError::InvalidTransition {
                script_id: self.script_id.clone(),
                from: self.approval_state,
                to,
            });
        }
        self.approval_state = to;
        Ok(())
    }

    pub fn approve(&mut self) -> Result<(), ScriptError> {
        self.transition(ApprovalState::Pending, ApprovalState::Approved)
    }

    pub fn reject(&mut self) -> Result<(), ScriptError> {
        self.transition(ApprovalState::Pending, ApprovalState::Rejected)
    }

    pub fn auto_deny(&mut self) -> Result<(), ScriptError> {
        self.transition(ApprovalState::Pending, ApprovalState::AutoDenied)
    }

    /// New version carrying an edited body. The receiver is left untouched.
    pub fn revise(&self, body: impl Into<String>) -> Result<Self, ScriptError> {
        let mut next = Self::new(body, self.kind, self.interpreter, self.source.clone(), self.risk)?;
        next.version = self.version + 1;
        Ok(next)
    }
}

/// A fenced block as it appears in the completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    pub label: String,
    pub body: String,
}

/// Fenced code blocks in order of appearance. Unterminated fences and empty
/// bodies are ignored.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match open.take() {
            None => {
                if let Some(rest) = trimmed.strip_prefix("```") {
                    let label = rest.split_whitespace().next().unwrap_or("").to_string();
                    open = Some((label, Vec::new()));
                }
            }
            Some((label, lines)) => {
                if trimmed.trim_end() == "```" {
                    let body = lines.join("\n");
                    if !body.trim().is_empty() {
                        blocks.push(FencedBlock { label, body });
                    }
                } else {
                    let mut lines = lines;
                    lines.push(line);
                    open = Some((label, lines));
                }
            }
        }
    }
    blocks
}

/// Whether some line greps for `marker`.
fn probes_marker(body: &str, marker: &str) -> bool {
    !marker.is_empty()
        && body.lines().any(|line| {
            line.find("grep")
                .map(|at| line[at..].contains(marker))
                .unwrap_or(false)
        })
}

pub fn classify_kind(body: &str, step: &PlanStep) -> ScriptKind {
    let command = step.validation.command.trim();
    if (!command.is_empty() && body.contains(command)) || probes_marker(body, &step.validation.marker) {
        ScriptKind::Validation
    } else if step.category.is_rooting_chain() {
        ScriptKind::Rooting
    } else {
        ScriptKind::Exploit
    }
}

/// Risk follows the step's automation level.
pub fn classify_risk(_script: &GeneratedScript, step: &PlanStep) -> RiskLevel {
    risk_for_step(step)
}

pub fn risk_for_step(step: &PlanStep) -> RiskLevel {
    match step.automation_level {
        AutomationLevel::HumanVerified => RiskLevel::Low,
        AutomationLevel::PartiallyAutomated => RiskLevel::Medium,
        AutomationLevel::FullyAutomated => RiskLevel::High,
    }
}

pub fn extract_scripts(response: &LlmResponse, step: &PlanStep, attempt: u32) -> Result<Vec<GeneratedScript>, ScriptError> {
    if response.raw_text.trim().is_empty() {
        return Err(ScriptError::EmptyCompletion);
    }
    let blocks = fenced_blocks(&response.raw_text);
    if blocks.is_empty() {
        return Err(ScriptError::NoScripts);
    }
    blocks
        .into_iter()
        .enumerate()
        .map(|(i, block)| {
            let source = ScriptSource {
                session_id: response.session_id.clone(),
                step_id: step.id.clone(),
                attempt_number: attempt,
                block_index: i,
            };
            let kind = classify_kind(&block.body, step);
            GeneratedScript::new(
                block.body,
                kind,
                Interpreter::from_fence_label(&block.label),
                source,
                risk_for_step(step),
            )
        })
        .collect()
}

/// Synthesizes a validation script from the step's checker command, for
/// attempts whose completion did not include one.
pub fn validation_script(step: &PlanStep, session_id: &str, attempt: u32, block_index: usize) -> Result<GeneratedScript, ScriptError> {
    GeneratedScript::new(
        step.validation.command.clone(),
        ScriptKind::Validation,
        Interpreter::Shell,
        ScriptSource {
            session_id: session_id.to_string(),
            step_id: step.id.clone(),
            attempt_number: attempt,
            block_index,
        },
        risk_for_step(step),
    )
}
