//! Campaign plan graph, device profiles and the outcome vocabulary.
//!
//! A plan is a DAG of [`PlanStep`]s. Prerequisite edges only order the walk;
//! a step still runs when one of its prerequisites ended `NotWorked`.
//!
//! Plan documents are TOML:
//!
//! ```toml
//! [plan]
//! name = "android-rooting"
//!
//! [[step]]
//! id = "backup"
//! title = "Backup Data"
//! category = "backup"
//! requires = []
//! prerequisites = []
//! automation_level = "fully_automated"
//! validation = { marker = "apps.ab", command = "adb shell ls /sdcard/pentest" }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CANONICAL_PLAN: &str = include_str!("../assets/plans/android-rooting.plan");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan document does not parse: {0}")]
    Parse(String),
    #[error("empty plan")]
    Empty,
    #[error("duplicate step id `{0}`")]
    DuplicateId(String),
    #[error("step `{step}` has unresolved prerequisite `{missing}`")]
    UnresolvedPrerequisite { step: String, missing: String },
    #[error("cycle detected through steps: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("step `{step}` has unknown category `{category}`")]
    UnknownCategory { step: String, category: String },
    #[error("unknown step id `{0}`")]
    UnknownStep(String),
    #[error("no step without prerequisites")]
    NoRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCategory {
    Backup,
    BootloaderCheck,
    BootloaderUnlock,
    RecoveryFlash,
    RecoveryBoot,
    MagiskSideload,
    KernelExploit,
    BootImagePatch,
    RootVerify,
    AdbWifi,
    FrameworkExploit,
    Rce,
    AdbDebugExploit,
    MitmNetwork,
    ComponentHijack,
}

impl StepCategory {
    pub const ALL: [StepCategory; 15] = [
        Self::Backup,
        Self::BootloaderCheck,
        Self::BootloaderUnlock,
        Self::RecoveryFlash,
        Self::RecoveryBoot,
        Self::MagiskSideload,
        Self::KernelExploit,
        Self::BootImagePatch,
        Self::RootVerify,
        Self::AdbWifi,
        Self::FrameworkExploit,
        Self::Rce,
        Self::AdbDebugExploit,
        Self::MitmNetwork,
        Self::ComponentHijack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Backup => "backup",
            Self::BootloaderCheck => "bootloader_check",
            Self::BootloaderUnlock => "bootloader_unlock",
            Self::RecoveryFlash => "recovery_flash",
            Self::RecoveryBoot => "recovery_boot",
            Self::MagiskSideload => "magisk_sideload",
            Self::KernelExploit => "kernel_exploit",
            Self::BootImagePatch => "boot_image_patch",
            Self::RootVerify => "root_verify",
            Self::AdbWifi => "adb_wifi",
            Self::FrameworkExploit => "framework_exploit",
            Self::Rce => "rce",
            Self::AdbDebugExploit => "adb_debug_exploit",
            Self::MitmNetwork => "mitm_network",
            Self::ComponentHijack => "component_hijack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Feature row label used in verdict matrices and metrics tables.
    pub fn feature_label(self) -> &'static str {
        match self {
            Self::Backup => "Backup Data",
            Self::BootloaderCheck => "Check Bootloader Status",
            Self::BootloaderUnlock => "Unlock Bootloader via Fastboot",
            Self::RecoveryFlash => "Flash Custom Recovery (TWRP)",
            Self::RecoveryBoot => "Boot to TWRP",
            Self::MagiskSideload => "Sideload Magisk.zip",
            Self::KernelExploit => "Use Kernel Exploits",
            Self::BootImagePatch => "Patch boot.img with Magisk (for A/B partitions)",
            Self::RootVerify => "Reboot and Verify Root",
            Self::AdbWifi => "Enable ADB over WiFi",
            Self::FrameworkExploit => "Metasploit Exploit",
            Self::Rce => "Remote Code Execution (RCE) via Malicious Software",
            Self::AdbDebugExploit => "ADB-Based Exploitation via Insecure Debugging",
            Self::MitmNetwork => "Network-Based Exploitation via MITM Attacks",
            Self::ComponentHijack => "Exploiting Android App Vulnerabilities (Component Hijacking)",
        }
    }

    /// Categories that belong to the rooting chain (as opposed to attack-surface steps).
    pub fn is_rooting_chain(self) -> bool {
        matches!(
            self,
            Self::Backup
                | Self::BootloaderCheck
                | Self::BootloaderUnlock
                | Self::RecoveryFlash
                | Self::RecoveryBoot
                | Self::MagiskSideload
                | Self::KernelExploit
                | Self::BootImagePatch
                | Self::RootVerify
        )
    }
}

impl fmt::Display for StepCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityFlag {
    Fastboot,
    RecoveryPartition,
    AbPartitions,
    AdbTcp,
    RootShell,
}

impl CapabilityFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fastboot => "fastboot",
            Self::RecoveryPartition => "recovery_partition",
            Self::AbPartitions => "ab_partitions",
            Self::AdbTcp => "adb_tcp",
            Self::RootShell => "root_shell",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutomationLevel {
    HumanVerified,
    PartiallyAutomated,
    FullyAutomated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSpec {
    /// String that must appear in the validation script's stdout.
    pub marker: String,
    /// Checker command run on the target to probe for the marker.
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub id: String,
    pub title: String,
    pub category: StepCategory,
    pub requires: BTreeSet<CapabilityFlag>,
    pub automation_level: AutomationLevel,
    pub validation: ValidationSpec,
    pub prerequisites: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootState {
    Rooted,
    Unrooted,
}

impl RootState {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rooted => "rooted",
            Self::Unrooted => "unrooted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityMechanism {
    Selinux,
    PlayProtect,
    VerifiedBoot,
}

impl fmt::Display for SecurityMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Selinux => "SELinux",
            Self::PlayProtect => "Google Play Protect",
            Self::VerifiedBoot => "Android Verified Boot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub android_version: u32,
    pub root_state: RootState,
    pub capabilities: BTreeSet<CapabilityFlag>,
    pub security_mechanisms: BTreeSet<SecurityMechanism>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("profile `{0}`: rooted profiles must expose root_shell")]
    RootedWithoutShell(String),
    #[error("profile `{0}`: android_version must be >= 1")]
    BadVersion(String),
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.android_version < 1 {
            return Err(ProfileError::BadVersion(self.name.clone()));
        }
        if self.root_state == RootState::Rooted
            && !self.capabilities.contains(&CapabilityFlag::RootShell)
        {
            return Err(ProfileError::RootedWithoutShell(self.name.clone()));
        }
        Ok(())
    }

    /// Column header, e.g. "Android 13 (Unrooted)".
    pub fn column_label(&self) -> String {
        let state = match self.root_state {
            RootState::Rooted => "Rooted",
            RootState::Unrooted => "Unrooted",
        };
        format!("Android {} ({})", self.android_version, state)
    }

    /// One-line description handed to the LLM.
    pub fn summary(&self) -> String {
        let caps: Vec<_> = self.capabilities.iter().map(|c| c.as_str()).collect();
        let mechs: Vec<_> = self.security_mechanisms.iter().map(|m| m.to_string()).collect();
        format!(
            "Android {} emulator, {}; capabilities: [{}]; security mechanisms: [{}]",
            self.android_version,
            self.root_state.as_str(),
            caps.join(", "),
            mechs.join(", ")
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupportedReason {
    FastbootNotAvailable,
    NoRecoveryAvailable,
    PartitionSchemeMissing,
}

/// Per-attempt outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Worked,
    NotWorked,
    EnvironmentUnsupported { reason: UnsupportedReason },
    Blocked { mechanism: SecurityMechanism },
}

impl Verdict {
    /// Verdict-matrix cell text. A blocked attempt did not work from the tester's view.
    pub fn cell_text(&self) -> &'static str {
        match self {
            Verdict::Worked => "Worked",
            Verdict::NotWorked | Verdict::Blocked { .. } => "Not Worked",
            Verdict::EnvironmentUnsupported { reason } => match reason {
                UnsupportedReason::FastbootNotAvailable => "Fastboot Not Available",
                UnsupportedReason::NoRecoveryAvailable => "No Recovery Available",
                UnsupportedReason::PartitionSchemeMissing => {
                    "Emulator Doesn\u{2019}t Have This Partition Scheme"
                }
            },
        }
    }

    pub fn is_environment_unsupported(&self) -> bool {
        matches!(self, Verdict::EnvironmentUnsupported { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanGraph {
    pub name: String,
    /// Steps in document order.
    pub steps: IndexMap<String, PlanStep>,
}

#[derive(Deserialize, Serialize)]
struct RawDocument {
    plan: RawHeader,
    #[serde(default)]
    step: Vec<RawStep>,
}

#[derive(Deserialize, Serialize)]
struct RawHeader {
    name: String,
}

#[derive(Deserialize, Serialize)]
struct RawStep {
    id: String,
    title: String,
    category: String,
    #[serde(default)]
    requires: Vec<CapabilityFlag>,
    #[serde(default)]
    prerequisites: Vec<String>,
    automation_level: AutomationLevel,
    validation: ValidationSpec,
}

/// Parses and validates a plan document.
pub fn load_plan(document: &str) -> Result<PlanGraph, PlanError> {
    let raw: RawDocument = toml::from_str(document).map_err(|e| PlanError::Parse(e.to_string()))?;
    if raw.step.is_empty() {
        return Err(PlanError::Empty);
    }
    let mut steps = IndexMap::with_capacity(raw.step.len());
    for s in raw.step {
        let category = StepCategory::parse(&s.category).ok_or_else(|| PlanError::UnknownCategory {
            step: s.id.clone(),
            category: s.category.clone(),
        })?;
        if steps.contains_key(&s.id) {
            return Err(PlanError::DuplicateId(s.id));
        }
        let step = PlanStep {
            id: s.id.clone(),
            title: s.title,
            category,
            requires: s.requires.into_iter().collect(),
            automation_level: s.automation_level,
            validation: s.validation,
            prerequisites: s.prerequisites.into_iter().collect(),
        };
        steps.insert(s.id, step);
    }
    let graph = PlanGraph { name: raw.plan.name, steps };
    graph.validate()?;
    Ok(graph)
}

/// The bundled Android rooting plan.
pub fn canonical_plan() -> PlanGraph {
    load_plan(CANONICAL_PLAN).expect("bundled plan is valid")
}

impl PlanGraph {
    fn validate(&self) -> Result<(), PlanError> {
        for step in self.steps.values() {
            for p in &step.prerequisites {
                if !self.steps.contains_key(p) {
                    return Err(PlanError::UnresolvedPrerequisite {
                        step: step.id.clone(),
                        missing: p.clone(),
                    });
                }
            }
        }
        if let Some(cycle) = self.find_cycle() {
            return Err(PlanError::Cycle(cycle));
        }
        if !self.steps.values().any(|s| s.prerequisites.is_empty()) {
            return Err(PlanError::NoRoot);
        }
        Ok(())
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Unvisited,
            Active,
            Done,
        }
        let mut marks: BTreeMap<&str, Mark> =
            self.steps.keys().map(|k| (k.as_str(), Mark::Unvisited)).collect();

        fn visit<'a>(
            graph: &'a PlanGraph,
            id: &'a str,
            marks: &mut BTreeMap<&'a str, Mark>,
            path: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            match marks[id] {
                Mark::Done => return None,
                Mark::Active => {
                    let start = path.iter().position(|p| *p == id).unwrap_or(0);
                    let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(id.to_string());
                    return Some(cycle);
                }
                Mark::Unvisited => {}
            }
            marks.insert(id, Mark::Active);
            path.push(id);
            for p in &graph.steps[id].prerequisites {
                if let Some(c) = visit(graph, p.as_str(), marks, path) {
                    return Some(c);
                }
            }
            path.pop();
            marks.insert(id, Mark::Done);
            None
        }

        for id in self.steps.keys() {
            let mut path = Vec::new();
            if let Some(c) = visit(self, id.as_str(), &mut marks, &mut path) {
                return Some(c);
            }
        }
        None
    }

    pub fn step(&self, id: &str) -> Option<&PlanStep> {
        self.steps.get(id)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Steps whose prerequisites are all completed and which are not completed
    /// themselves, in id-lexicographic order.
    pub fn eligible_steps(&self, completed: &BTreeSet<String>) -> Result<Vec<&PlanStep>, PlanError> {
        if let Some(unknown) = completed.iter().find(|id| !self.steps.contains_key(*id)) {
            return Err(PlanError::UnknownStep(unknown.clone()));
        }
        let mut out: Vec<&PlanStep> = self
            .steps
            .values()
            .filter(|s| !completed.contains(&s.id) && s.prerequisites.is_subset(completed))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    /// Execution order: repeatedly take the lexicographically smallest eligible step.
    pub fn execution_order(&self) -> Vec<&PlanStep> {
        let mut completed = BTreeSet::new();
        let mut order = Vec::with_capacity(self.steps.len());
        while let Some(next) = self
            .eligible_steps(&completed)
            .expect("completed ids come from the graph")
            .first()
            .copied()
        {
            completed.insert(next.id.clone());
            order.push(next);
        }
        order
    }

    /// Longest prerequisite chain above each step.
    fn depths(&self) -> BTreeMap<&str, usize> {
        let mut depths = BTreeMap::new();
        for step in self.document_topological_order() {
            let d = step
                .prerequisites
                .iter()
                .map(|p| depths[p.as_str()] + 1)
                .max()
                .unwrap_or(0);
            depths.insert(step.id.as_str(), d);
        }
        depths
    }

    /// Topological order with document order as the tie-break.
    fn document_topological_order(&self) -> Vec<&PlanStep> {
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut order = Vec::with_capacity(self.steps.len());
        while order.len() < self.steps.len() {
            let next = self
                .steps
                .values()
                .find(|s| {
                    !done.contains(s.id.as_str())
                        && s.prerequisites.iter().all(|p| done.contains(p.as_str()))
                })
                .expect("validated plan is acyclic");
            done.insert(next.id.as_str());
            order.push(next);
        }
        order
    }

    /// Human-readable outline of the plan, one line per step, indented by depth.
    pub fn serialize_flowchart(&self) -> String {
        let depths = self.depths();
        let mut out = String::new();
        for step in self.document_topological_order() {
            let indent = "  ".repeat(depths[step.id.as_str()]);
            out.push_str(&indent);
            out.push_str(&step.id);
            out.push_str(": ");
            out.push_str(&step.title);
            if !step.prerequisites.is_empty() {
                let prereqs: Vec<_> = step.prerequisites.iter().map(String::as_str).collect();
                out.push_str(" [requires: ");
                out.push_str(&prereqs.join(", "));
                out.push(']');
            }
            out.push('\n');
        }
        out
    }

    /// Renders the graph back into a plan document accepted by [`load_plan`].
    pub fn to_document(&self) -> String {
        let raw = RawDocument {
            plan: RawHeader { name: self.name.clone() },
            step: self
                .steps
                .values()
                .map(|s| RawStep {
                    id: s.id.clone(),
                    title: s.title.clone(),
                    category: s.category.as_str().to_string(),
                    requires: s.requires.iter().copied().collect(),
                    prerequisites: s.prerequisites.iter().cloned().collect(),
                    automation_level: s.automation_level,
                    validation: s.validation.clone(),
                })
                .collect(),
        };
        toml::to_string(&raw).expect("plan serializes")
    }
}

/// Returns the environment verdict for a step the profile cannot support, or
/// `None` when the step may proceed.
pub fn environment_gate(step: &PlanStep, profile: &DeviceProfile) -> Option<Verdict> {
    let missing = |flag| step.requires.contains(&flag) && !profile.capabilities.contains(&flag);
    let reason = if missing(CapabilityFlag::Fastboot) {
        UnsupportedReason::FastbootNotAvailable
    } else if missing(CapabilityFlag::RecoveryPartition) {
        UnsupportedReason::NoRecoveryAvailable
    } else if missing(CapabilityFlag::AbPartitions) {
        UnsupportedReason::PartitionSchemeMissing
    } else {
        // Missing adb_tcp / root_shell is not an environment limitation: the
        // attempt runs and fails on the device instead.
        return None;
    };
    Some(Verdict::EnvironmentUnsupported { reason })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(id: &str, prereqs: &[&str]) -> String {
        format!(
            "[[step]]\nid = \"{id}\"\ntitle = \"{id}\"\ncategory = \"backup\"\nprerequisites = [{}]\nautomation_level = \"human_verified\"\nvalidation = {{ marker = \"ok\", command = \"true\" }}\n",
            prereqs.iter().map(|p| format!("\"{p}\"")).collect::<Vec<_>>().join(", ")
        )
    }

    fn doc(steps: &[String]) -> String {
        format!("[plan]\nname = \"t\"\n\n{}", steps.join("\n"))
    }

    #[test]
    fn empty_plan_is_rejected() {
        assert_eq!(load_plan("[plan]\nname = \"x\"\n"), Err(PlanError::Empty));
    }

    #[test]
    fn two_step_cycle_is_rejected() {
        let err = load_plan(&doc(&[step("a", &["b"]), step("b", &["a"])])).unwrap_err();
        assert!(matches!(err, PlanError::Cycle(_)), "{err:?}");
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let err = load_plan(&doc(&[step("r", &[]), step("a", &["a"])])).unwrap_err();
        assert_eq!(err, PlanError::Cycle(vec!["a".into(), "a".into()]));
    }

    #[test]
    fn duplicate_and_unresolved_ids() {
        assert_eq!(
            load_plan(&doc(&[step("a", &[]), step("a", &[])])),
            Err(PlanError::DuplicateId("a".into()))
        );
        assert_eq!(
            load_plan(&doc(&[step("a", &["ghost"])])),
            Err(PlanError::UnresolvedPrerequisite { step: "a".into(), missing: "ghost".into() })
        );
    }

    #[test]
    fn unknown_category() {
        let d = doc(&[step("a", &[]).replace("\"backup\"", "\"teleport\"")]);
        assert_eq!(
            load_plan(&d),
            Err(PlanError::UnknownCategory { step: "a".into(), category: "teleport".into() })
        );
    }

    #[test]
    fn single_step_flowchart_has_no_suffix() {
        let g = load_plan(&doc(&[step("only", &[])])).unwrap();
        assert_eq!(g.serialize_flowchart(), "only: only\n");
    }

    #[test]
    fn eligible_steps_edges() {
        let g = load_plan(&doc(&[step("b", &[]), step("a", &[]), step("c", &["a", "b"])])).unwrap();
        let ids = |v: Vec<&PlanStep>| v.into_iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(g.eligible_steps(&BTreeSet::new()).unwrap()), ["a", "b"]);
        let all: BTreeSet<String> = g.steps.keys().cloned().collect();
        assert!(g.eligible_steps(&all).unwrap().is_empty());
        let err = g.eligible_steps(&BTreeSet::from(["zzz".to_string()])).unwrap_err();
        assert_eq!(err, PlanError::UnknownStep("zzz".into()));
    }

    #[test]
    fn rooted_profile_needs_root_shell() {
        let p = DeviceProfile {
            name: "x".into(),
            android_version: 11,
            root_state: RootState::Rooted,
            capabilities: BTreeSet::new(),
            security_mechanisms: BTreeSet::new(),
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn verdict_serde_shape() {
        let v = Verdict::EnvironmentUnsupported { reason: UnsupportedReason::NoRecoveryAvailable };
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"kind":"environment_unsupported","reason":"no_recovery_available"}"#);
        assert_eq!(serde_json::from_str::<Verdict>(&json).unwrap(), v);
    }
}
