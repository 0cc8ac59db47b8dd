//! Static deny-rule screening and the human approval queue.
//!
//! Nothing reaches a device adapter unless it cleared screening and was
//! approved, either by an operator through a ticket or, in
//! [`ApprovalMode::AutoApproveLowRisk`], automatically for low-risk scripts.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::script::{ApprovalState, GeneratedScript, RiskLevel, ScriptError};

pub const DEFAULT_DENY_RULES: &str = include_str!("../assets/policy/deny.rules");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApprovalError {
    #[error("deny rule `{rule_id}`: {message}")]
    BadRule { rule_id: String, message: String },
    #[error("duplicate deny rule id `{0}`")]
    DuplicateRule(String),
    #[error("rules file unparsable: {0}")]
    Parse(String),
    #[error("script {0} was auto-denied by screening")]
    ScriptAutoDenied(String),
    #[error("script {0} is already decided")]
    AlreadyDecided(String),
    #[error("script {0} is not registered with the gate")]
    UnknownScript(String),
    #[error("unknown ticket `{0}`")]
    UnknownTicket(String),
    #[error("ticket `{0}` is already resolved")]
    AlreadyResolved(String),
    #[error("edited body denied by rule `{rule_id}`")]
    EditDenied { rule_id: String },
    #[error("operator identity is required")]
    MissingOperator,
    #[error("wait for ticket `{0}` aborted")]
    Aborted(String),
    #[error("target `{0}` is not in the allowlist")]
    TargetNotAllowlisted(String),
    #[error(transparent)]
    Script(#[from] ScriptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Literal,
    Regex,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenyRuleSpec {
    pub id: String,
    pub kind: PatternKind,
    pub pattern: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct DenyRule {
    pub rule_id: String,
    pub kind: PatternKind,
    pub pattern: String,
    pub reason: String,
    matcher: Regex,
}

impl DenyRule {
    pub fn new(spec: DenyRuleSpec) -> Result<Self, ApprovalError> {
        let source = match spec.kind {
            PatternKind::Literal => regex::escape(&spec.pattern),
            PatternKind::Regex => spec.pattern.clone(),
        };
        if spec.pattern.is_empty() {
            return Err(ApprovalError::BadRule { rule_id: spec.id, message: "empty pattern".into() });
        }
        let matcher = Regex::new(&source)
            .map_err(|e| ApprovalError::BadRule { rule_id: spec.id.clone(), message: e.to_string() })?;
        Ok(Self {
            rule_id: spec.id,
            kind: spec.kind,
            pattern: spec.pattern,
            reason: spec.reason,
            matcher,
        })
    }

    pub fn matches(&self, body: &str) -> bool {
        self.matcher.is_match(body)
    }
}

#[derive(Deserialize)]
struct RulesFile {
    #[serde(default)]
    rule: Vec<DenyRuleSpec>,
}

pub fn parse_deny_rules(text: &str) -> Result<Vec<DenyRule>, ApprovalError> {
    let file: RulesFile = toml::from_str(text).map_err(|e| ApprovalError::Parse(e.to_string()))?;
    let mut seen = BTreeSet::new();
    file.rule
        .into_iter()
        .map(|spec| {
            if !seen.insert(spec.id.clone()) {
                return Err(ApprovalError::DuplicateRule(spec.id));
            }
            DenyRule::new(spec)
        })
        .collect()
}

pub fn default_deny_rules() -> Vec<DenyRule> {
    parse_deny_rules(DEFAULT_DENY_RULES).expect("bundled deny rules compile")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalMode {
    #[default]
    ManualAll,
    AutoApproveLowRisk,
}

#[derive(Debug, Clone)]
pub struct ApprovalPolicy {
    pub mode: ApprovalMode,
    pub deny_rules: Vec<DenyRule>,
    /// Real-device endpoint identifiers that may be targeted.
    pub target_allowlist: BTreeSet<String>,
}

impl Default for ApprovalPolicy {
    fn default() -> Self {
        Self {
            mode: ApprovalMode::ManualAll,
            deny_rules: default_deny_rules(),
            target_allowlist: BTreeSet::new(),
        }
    }
}

/// Who answers approval tickets when a campaign runs from the command line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// Prompt on the terminal.
    #[default]
    Terminal,
    /// Approve every cleared script immediately (unattended test runs).
    Auto,
    /// Leave tickets open for an external console.
    External,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(default)]
    mode: ApprovalMode,
    #[serde(default)]
    operator: OperatorKind,
    /// Rules file, relative to the policy file. Defaults to the bundled rules.
    #[serde(default)]
    deny_rules: Option<String>,
    #[serde(default)]
    rule: Vec<DenyRuleSpec>,
    #[serde(default)]
    target_allowlist: Vec<String>,
}

impl ApprovalPolicy {
    /// Parses a policy document. `base_dir` resolves a relative `deny_rules` path.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<(Self, OperatorKind), ApprovalError> {
        let file: PolicyFile = toml::from_str(text).map_err(|e| ApprovalError::Parse(e.to_string()))?;
        let mut rules = match &file.deny_rules {
            None => default_deny_rules(),
            Some(path) => {
                let path = base_dir.map(|d| d.join(path)).unwrap_or_else(|| path.into());
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| ApprovalError::Parse(format!("{}: {e}", path.display())))?;
                parse_deny_rules(&text)?
            }
        };
        for spec in file.rule {
            if rules.iter().any(|r| r.rule_id == spec.id) {
                return Err(ApprovalError::DuplicateRule(spec.id));
            }
            rules.push(DenyRule::new(spec)?);
        }
        Ok((
            Self {
                mode: file.mode,
                deny_rules: rules,
                target_allowlist: file.target_allowlist.into_iter().collect(),
            },
            file.operator,
        ))
    }

    pub fn load(path: &Path) -> Result<(Self, OperatorKind), ApprovalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ApprovalError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    /// Checks a real-device endpoint against the allowlist. An empty allowlist
    /// admits nothing.
    pub fn check_target(&self, endpoint_id: &str) -> Result<(), ApprovalError> {
        if self.target_allowlist.contains(endpoint_id) {
            Ok(())
        } else {
            Err(ApprovalError::TargetNotAllowlisted(endpoint_id.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ScreenOutcome {
    Cleared,
    Denied { rule_id: String },
}

/// First matching rule in list order wins.
pub fn screen_body(body: &str, policy: &ApprovalPolicy) -> ScreenOutcome {
    policy
        .deny_rules
        .iter()
        .find(|r| r.matches(body))
        .map(|r| ScreenOutcome::Denied { rule_id: r.rule_id.clone() })
        .unwrap_or(ScreenOutcome::Cleared)
}

/// Screens `script`; a denial moves it to `AutoDenied` for good.
pub fn screen(script: &mut GeneratedScript, policy: &ApprovalPolicy) -> ScreenOutcome {
    let outcome = screen_body(&script.body, policy);
    if matches!(outcome, ScreenOutcome::Denied { .. }) && script.approval_state == ApprovalState::Pending {
        script.approval_state = ApprovalState::AutoDenied;
    }
    outcome
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum TicketDecision {
    Approved { by: String, at: DateTime<Utc>, script_id: String, version: u32 },
    Rejected { by: String, at: DateTime<Utc>, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalTicket {
    pub ticket_id: String,
    pub script_id: String,
    pub lineage_key: String,
    pub version: u32,
    pub created_at: DateTime<Utc>,
    pub decision: Option<TicketDecision>,
    pub edited_body: Option<String>,
}

impl ApprovalTicket {
    pub fn is_open(&self) -> bool {
        self.decision.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub decision: DecisionKind,
    pub operator: String,
    #[serde(default)]
    pub reason: Option<String>,
    #[serde(default)]
    pub edited_body: Option<String>,
}

impl Resolution {
    pub fn approve(operator: impl Into<String>) -> Self {
        Self { decision: DecisionKind::Approve, operator: operator.into(), reason: None, edited_body: None }
    }

    pub fn approve_edited(operator: impl Into<String>, body: impl Into<String>) -> Self {
        Self { edited_body: Some(body.into()), ..Self::approve(operator) }
    }

    pub fn reject(operator: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            decision: DecisionKind::Reject,
            operator: operator.into(),
            reason: Some(reason.into()),
            edited_body: None,
        }
    }
}

/// Automatic approval: only low-risk scripts in `AutoApproveLowRisk` mode.
pub fn auto_decision(script: &GeneratedScript, policy: &ApprovalPolicy) -> Option<ApprovalState> {
    (policy.mode == ApprovalMode::AutoApproveLowRisk
        && script.risk == RiskLevel::Low
        && script.approval_state == ApprovalState::Pending
        && screen_body(&script.body, policy) == ScreenOutcome::Cleared)
        .then_some(ApprovalState::Approved)
}

struct TicketEntry {
    ticket: ApprovalTicket,
    policy: Arc<ApprovalPolicy>,
}

#[derive(Default)]
struct GateState {
    /// Version chains keyed by lineage; index = version - 1.
    scripts: HashMap<String, Vec<GeneratedScript>>,
    tickets: IndexMap<String, TicketEntry>,
    by_script: HashMap<(String, u32), String>,
    next_ticket: u64,
}

/// Shared ticket book. Resolution is atomic: the first resolver wins.
#[derive(Default)]
pub struct ApprovalGate {
    state: Mutex<GateState>,
    changed: Condvar,
}

impl std::fmt::Debug for ApprovalGate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApprovalGate").finish_non_exhaustive()
    }
}

impl ApprovalGate {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a script version to its lineage. Re-registering the same version is a no-op.
    pub fn register(&self, script: &GeneratedScript) {
        let mut st = self.state.lock().unwrap();
        let chain = st.scripts.entry(script.lineage_key()).or_default();
        if chain.len() < script.version as usize {
            chain.push(script.clone());
        }
    }

    /// Screens and registers a script.
    pub fn screen(&self, script: &mut GeneratedScript, policy: &ApprovalPolicy) -> ScreenOutcome {
        let outcome = screen(script, policy);
        self.register(script);
        let mut st = self.state.lock().unwrap();
        if let Some(stored) = st
            .scripts
            .get_mut(&script.lineage_key())
            .and_then(|c| c.get_mut(script.version as usize - 1))
        {
            stored.approval_state = script.approval_state;
        }
        outcome
    }

    /// Applies [`auto_decision`]; on approval the registered version is marked Approved.
    pub fn try_auto_approve(&self, script: &mut GeneratedScript, policy: &ApprovalPolicy) -> bool {
        if auto_decision(script, policy).is_none() {
            return false;
        }
        let mut st = self.state.lock().unwrap();
        let Some(stored) = st
            .scripts
            .get_mut(&script.lineage_key())
            .and_then(|c| c.get_mut(script.version as usize - 1))
        else {
            return false;
        };
        if stored.approve().is_err() {
            return false;
        }
        script.approval_state = ApprovalState::Approved;
        true
    }

    pub fn script(&self, lineage_key: &str, version: u32) -> Option<GeneratedScript> {
        let st = self.state.lock().unwrap();
        st.scripts.get(lineage_key)?.get(version.checked_sub(1)? as usize).cloned()
    }

    pub fn versions(&self, lineage_key: &str) -> Vec<GeneratedScript> {
        self.state.lock().unwrap().scripts.get(lineage_key).cloned().unwrap_or_default()
    }

    /// Opens a ticket for a cleared, pending script. Idempotent per script version.
    pub fn request_approval(
        &self,
        script: &GeneratedScript,
        policy: Arc<ApprovalPolicy>,
    ) -> Result<ApprovalTicket, ApprovalError> {
        let key = script.lineage_key();
        let mut st = self.state.lock().unwrap();
        if let Some(id) = st.by_script.get(&(key.clone(), script.version)) {
            return Ok(st.tickets[id].ticket.clone());
        }
        let stored = st
            .scripts
            .get(&key)
            .and_then(|c| c.get(script.version as usize - 1))
            .cloned()
            .ok_or_else(|| ApprovalError::UnknownScript(script.script_id.clone()))?;
        match stored.approval_state {
            ApprovalState::AutoDenied => return Err(ApprovalError::ScriptAutoDenied(stored.script_id.clone())),
            ApprovalState::Approved | ApprovalState::Rejected => {
                return Err(ApprovalError::AlreadyDecided(stored.script_id.clone()))
            }
            ApprovalState::Pending => {}
        }
        if let ScreenOutcome::Denied { .. } = screen_body(&stored.body, &policy) {
            return Err(ApprovalError::ScriptAutoDenied(stored.script_id.clone()));
        }
        st.next_ticket += 1;
        let ticket = ApprovalTicket {
            ticket_id: format!("tkt-{:06}", st.next_ticket),
            script_id: stored.script_id.clone(),
            lineage_key: key.clone(),
            version: script.version,
            created_at: Utc::now(),
            decision: None,
            edited_body: None,
        };
        st.by_script.insert((key, script.version), ticket.ticket_id.clone());
        st.tickets.insert(ticket.ticket_id.clone(), TicketEntry { ticket: ticket.clone(), policy });
        self.changed.notify_all();
        Ok(ticket)
    }

    /// Resolves an open ticket and returns the resulting script version.
    pub fn resolve(&self, ticket_id: &str, resolution: Resolution) -> Result<(ApprovalTicket, GeneratedScript), ApprovalError> {
        if resolution.operator.trim().is_empty() {
            return Err(ApprovalError::MissingOperator);
        }
        let mut guard = self.state.lock().unwrap();
        let st = &mut *guard;
        let entry = st
            .tickets
            .get_mut(ticket_id)
            .ok_or_else(|| ApprovalError::UnknownTicket(ticket_id.to_string()))?;
        if !entry.ticket.is_open() {
            return Err(ApprovalError::AlreadyResolved(ticket_id.to_string()));
        }
        let chain = st
            .scripts
            .get_mut(&entry.ticket.lineage_key)
            .ok_or_else(|| ApprovalError::UnknownScript(entry.ticket.script_id.clone()))?;
        let idx = entry.ticket.version as usize - 1;
        let now = Utc::now();
        let result = match resolution.decision {
            DecisionKind::Reject => {
                chain[idx].reject()?;
                entry.ticket.decision = Some(TicketDecision::Rejected {
                    by: resolution.operator,
                    at: now,
                    reason: resolution.reason.unwrap_or_default(),
                });
                chain[idx].clone()
            }
            DecisionKind::Approve => match resolution.edited_body {
                None => {
                    chain[idx].approve()?;
                    let s = chain[idx].clone();
                    entry.ticket.decision = Some(TicketDecision::Approved {
                        by: resolution.operator,
                        at: now,
                        script_id: s.script_id.clone(),
                        version: s.version,
                    });
                    s
                }
                Some(body) => {
                    let latest = chain.last().expect("chain is non-empty");
                    let mut next = latest.revise(body.clone())?;
                    if let ScreenOutcome::Denied { rule_id } = screen_body(&next.body, &entry.policy) {
                        return Err(ApprovalError::EditDenied { rule_id });
                    }
                    next.approve()?;
                    chain.push(next.clone());
                    entry.ticket.edited_body = Some(body);
                    entry.ticket.decision = Some(TicketDecision::Approved {
                        by: resolution.operator,
                        at: now,
                        script_id: next.script_id.clone(),
                        version: next.version,
                    });
                    next
                }
            },
        };
        let ticket = entry.ticket.clone();
        drop(guard);
        self.changed.notify_all();
        Ok((ticket, result))
    }

    pub fn ticket(&self, ticket_id: &str) -> Option<ApprovalTicket> {
        self.state.lock().unwrap().tickets.get(ticket_id).map(|e| e.ticket.clone())
    }

    pub fn tickets(&self, open_only: bool) -> Vec<ApprovalTicket> {
        self.state
            .lock()
            .unwrap()
            .tickets
            .values()
            .filter(|e| !open_only || e.ticket.is_open())
            .map(|e| e.ticket.clone())
            .collect()
    }

    /// Blocks until the ticket is decided or `abort` is raised.
    pub fn wait_for_decision(&self, ticket_id: &str, abort: &AtomicBool) -> Result<ApprovalTicket, ApprovalError> {
        let mut st = self.state.lock().unwrap();
        loop {
            let ticket = st
                .tickets
                .get(ticket_id)
                .map(|e| e.ticket.clone())
                .ok_or_else(|| ApprovalError::UnknownTicket(ticket_id.to_string()))?;
            if !ticket.is_open() {
                return Ok(ticket);
            }
            if abort.load(Ordering::SeqCst) {
                return Err(ApprovalError::Aborted(ticket_id.to_string()));
            }
            st = self.changed.wait_timeout(st, Duration::from_millis(100)).unwrap().0;
        }
    }

    /// Wakes every waiter, e.g. after raising an abort flag.
    pub fn notify(&self) {
        self.changed.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::{Interpreter, ScriptKind, ScriptSource};

    fn script(body: &str, risk: RiskLevel) -> GeneratedScript {
        GeneratedScript::new(
            body,
            ScriptKind::Exploit,
            Interpreter::Shell,
            ScriptSource { session_id: "s".into(), step_id: "x".into(), attempt_number: 1, block_index: 0 },
            risk,
        )
        .unwrap()
    }

    fn policy() -> Arc<ApprovalPolicy> {
        Arc::new(ApprovalPolicy::default())
    }

    #[test]
    fn default_rules_examples() {
        let p = ApprovalPolicy::default();
        let mut s = script("adb shell rm -rf /", RiskLevel::Low);
        assert_eq!(screen(&mut s, &p), ScreenOutcome::Denied { rule_id: "destructive-fs".into() });
        assert_eq!(s.approval_state, ApprovalState::AutoDenied);
        let mut s = script("adb shell getprop ro.boot.verifiedbootstate", RiskLevel::Low);
        assert_eq!(screen(&mut s, &p), ScreenOutcome::Cleared);
        assert_eq!(s.approval_state, ApprovalState::Pending);
        let mut s = script("adb shell dd if=/dev/zero of=/dev/block/mmcblk0", RiskLevel::Low);
        assert_eq!(screen(&mut s, &p), ScreenOutcome::Denied { rule_id: "raw-block-write".into() });
        let mut s = script("dd if=/dev/zero of=/dev/block", RiskLevel::Low);
        assert_eq!(screen(&mut s, &p), ScreenOutcome::Denied { rule_id: "raw-block-write".into() });
    }

    #[test]
    fn safe_subpaths_are_not_destructive() {
        let p = ApprovalPolicy::default();
        assert_eq!(screen_body("adb shell rm -rf /sdcard/pentest/tmp", &p), ScreenOutcome::Cleared);
        assert_eq!(screen_body("adb shell rm /data/local/tmp/lab-poc", &p), ScreenOutcome::Cleared);
    }

    #[test]
    fn bundled_fixtures_clear_default_rules() {
        let p = ApprovalPolicy::default();
        for rec in crate::llm::StubFixtures::bundled().records() {
            for block in crate::script::fenced_blocks(&rec.text) {
                assert_eq!(screen_body(&block.body, &p), ScreenOutcome::Cleared, "{}: {}", rec.step_id, block.body);
            }
        }
    }

    #[test]
    fn first_matching_rule_wins() {
        let text = r#"
[[rule]]
id = "a"
kind = "literal"
pattern = "foo"
reason = "a"
[[rule]]
id = "b"
kind = "regex"
pattern = "fo+"
reason = "b"
"#;
        let rules = parse_deny_rules(text).unwrap();
        let p = ApprovalPolicy { deny_rules: rules, ..ApprovalPolicy::default() };
        assert_eq!(screen_body("foo", &p), ScreenOutcome::Denied { rule_id: "a".into() });
        assert_eq!(screen_body("fooo", &p), ScreenOutcome::Denied { rule_id: "a".into() });
        assert_eq!(screen_body("fo", &p), ScreenOutcome::Denied { rule_id: "b".into() });
    }

    #[test]
    fn bad_rules_are_rejected() {
        let bad = "[[rule]]\nid = \"x\"\nkind = \"regex\"\npattern = \"(\"\nreason = \"r\"\n";
        assert!(matches!(parse_deny_rules(bad), Err(ApprovalError::BadRule { .. })));
        let dup = "[[rule]]\nid = \"x\"\nkind = \"literal\"\npattern = \"a\"\nreason = \"r\"\n".repeat(2);
        assert_eq!(parse_deny_rules(&dup).unwrap_err(), ApprovalError::DuplicateRule("x".into()));
    }

    #[test]
    fn request_approval_contract() {
        let gate = ApprovalGate::new();
        let p = policy();
        let mut s = script("adb shell id", RiskLevel::High);
        gate.screen(&mut s, &p);
        let t1 = gate.request_approval(&s, p.clone()).unwrap();
        assert!(t1.is_open());
        let t2 = gate.request_approval(&s, p.clone()).unwrap();
        assert_eq!(t1.ticket_id, t2.ticket_id);

        let mut denied = script("rm -rf /", RiskLevel::High);
        denied.source.block_index = 1;
        gate.screen(&mut denied, &p);
        assert!(matches!(gate.request_approval(&denied, p), Err(ApprovalError::ScriptAutoDenied(_))));
    }

    #[test]
    fn resolve_contract() {
        let gate = ApprovalGate::new();
        let p = policy();
        let mut s = script("adb shell id", RiskLevel::High);
        gate.screen(&mut s, &p);
        let t = gate.request_approval(&s, p.clone()).unwrap();

        let err = gate.resolve(&t.ticket_id, Resolution::approve_edited("alice", "adb shell id\nrm -rf /")).unwrap_err();
        assert_eq!(err, ApprovalError::EditDenied { rule_id: "destructive-fs".into() });
        assert!(gate.ticket(&t.ticket_id).unwrap().is_open());

        let (ticket, v2) = gate
            .resolve(&t.ticket_id, Resolution::approve_edited("alice", "adb shell id\necho logged"))
            .unwrap();
        assert_eq!(v2.version, 2);
        assert_eq!(v2.approval_state, ApprovalState::Approved);
        assert!(matches!(ticket.decision, Some(TicketDecision::Approved { version: 2, .. })));
        let v1 = gate.script(&s.lineage_key(), 1).unwrap();
        assert_eq!(v1.body, "adb shell id");
        assert_eq!(v1.approval_state, ApprovalState::Pending);

        assert_eq!(
            gate.resolve(&t.ticket_id, Resolution::approve("bob")).unwrap_err(),
            ApprovalError::AlreadyResolved(t.ticket_id.clone())
        );
        assert!(matches!(gate.request_approval(&v2, p), Err(ApprovalError::AlreadyDecided(_))));
    }

    #[test]
    fn approve_unedited_and_reject() {
        let gate = ApprovalGate::new();
        let p = policy();
        let mut a = script("adb shell id", RiskLevel::High);
        gate.screen(&mut a, &p);
        let t = gate.request_approval(&a, p.clone()).unwrap();
        let (_, s) = gate.resolve(&t.ticket_id, Resolution::approve("op")).unwrap();
        assert_eq!((s.version, s.approval_state), (1, ApprovalState::Approved));

        let mut b = script("adb shell whoami", RiskLevel::High);
        b.source.block_index = 9;
        gate.screen(&mut b, &p);
        let t = gate.request_approval(&b, p).unwrap();
        let (ticket, s) = gate.resolve(&t.ticket_id, Resolution::reject("op", "not in scope")).unwrap();
        assert_eq!(s.approval_state, ApprovalState::Rejected);
        assert!(matches!(ticket.decision, Some(TicketDecision::Rejected { ref reason, .. }) if reason == "not in scope"));
        assert_eq!(gate.resolve("tkt-999", Resolution::approve("op")).unwrap_err(), ApprovalError::UnknownTicket("tkt-999".into()));
        assert_eq!(gate.resolve(&t.ticket_id, Resolution::approve(" ")).unwrap_err(), ApprovalError::MissingOperator);
    }

    #[test]
    fn concurrent_resolution_has_one_winner() {
        let gate = Arc::new(ApprovalGate::new());
        let p = policy();
        let mut s = script("adb shell id", RiskLevel::High);
        gate.screen(&mut s, &p);
        let t = gate.request_approval(&s, p).unwrap();
        let wins: usize = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let gate = gate.clone();
                    let id = t.ticket_id.clone();
                    scope.spawn(move || gate.resolve(&id, Resolution::approve(format!("op{i}"))).is_ok() as usize)
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(wins, 1);
    }

    #[test]
    fn auto_decision_modes() {
        let manual = ApprovalPolicy::default();
        let auto = ApprovalPolicy { mode: ApprovalMode::AutoApproveLowRisk, ..ApprovalPolicy::default() };
        assert_eq!(auto_decision(&script("msfconsole -q", RiskLevel::Low), &manual), None);
        assert_eq!(auto_decision(&script("msfconsole -q", RiskLevel::Low), &auto), Some(ApprovalState::Approved));
        assert_eq!(auto_decision(&script("adb backup", RiskLevel::High), &auto), None);
    }

    #[test]
    fn allowlist() {
        let mut p = ApprovalPolicy::default();
        assert!(p.check_target("adb://127.0.0.1:5037/emulator-5554").is_err());
        p.target_allowlist.insert("adb://127.0.0.1:5037/emulator-5554".into());
        assert!(p.check_target("adb://127.0.0.1:5037/emulator-5554").is_ok());
    }

    #[test]
    fn policy_file() {
        let (p, op) = ApprovalPolicy::parse(
            "mode = \"auto_approve_low_risk\"\noperator = \"auto\"\ntarget_allowlist = [\"adbcli:abc\"]\n[[rule]]\nid = \"no-reboot\"\nkind = \"literal\"\npattern = \"reboot\"\nreason = \"r\"\n",
            None,
        )
        .unwrap();
        assert_eq!(p.mode, ApprovalMode::AutoApproveLowRisk);
        assert_eq!(op, OperatorKind::Auto);
        assert_eq!(p.deny_rules.last().unwrap().rule_id, "no-reboot");
        assert!(p.check_target("adbcli:abc").is_ok());
        assert!(ApprovalPolicy::parse("bogus = 1", None).is_err());
    }
}
