//! Evaluation metrics and campaign reports.
//!
//! Counters are taken once per (device, step) final outcome; re-prompts inside
//! a step do not add to the denominator.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RunRecord, RunStatus};
use crate::plan::{PlanGraph, Verdict};
use crate::script::{risk_for_step, RiskLevel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const NOT_DETECTED: &str = "Not Detected";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("sample has zero attempts")]
    ZeroAttempts,
    #[error("successful ({successful}) + blocked ({blocked}) exceeds total ({total})")]
    InconsistentSample { successful: u64, blocked: u64, total: u64 },
    #[error("every profile was environment-limited")]
    AllEnvironmentLimited,
    #[error("run {0} has not completed")]
    NotCompleted(String),
    #[error("run has no campaign snapshot")]
    MissingCampaign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub successful_executions: u64,
    pub blocked_exploits: u64,
    pub total_attempts: u64,
}

impl MetricsSample {
    pub fn new(successful_executions: u64, blocked_exploits: u64, total_attempts: u64) -> Result<Self, MetricsError> {
        let s = Self { successful_executions, blocked_exploits, total_attempts };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), MetricsError> {
        if self.successful_executions.saturating_add(self.blocked_exploits) > self.total_attempts {
            return Err(MetricsError::InconsistentSample {
                successful: self.successful_executions,
                blocked: self.blocked_exploits,
                total: self.total_attempts,
            });
        }
        Ok(())
    }
}

/// Percentage rounded to one decimal place, half away from zero. The
/// unrounded ratio is kept alongside.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Percent {
    value: f64,
    exact: f64,
}

impl Percent {
    /// `100 * num / den`, rounded in tenths with integer arithmetic.
    fn ratio(num: u64, den: u64) -> Self {
        let (n, d) = (num as u128, den as u128);
        let tenths = (2000 * n + d) / (2 * d);
        Percent { value: tenths as f64 / 10.0, exact: 100.0 * num as f64 / den as f64 }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    pub fn exact(self) -> f64 {
        self.exact
    }

    /// "100%", "50%", "12.5%".
    pub fn display(self) -> String {
        if self.value.fract() == 0.0 {
            format!("{}%", self.value as u64)
        } else {
            format!("{:.1}%", self.value)
        }
    }
}

impl Serialize for Percent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value)
    }
}

pub fn success_rate(sample: &MetricsSample) -> Result<Percent, MetricsError> {
    sample.check()?;
    if sample.total_attempts == 0 {
        return Err(MetricsError::ZeroAttempts);
    }
    Ok(Percent::ratio(sample.successful_executions, sample.total_attempts))
}

pub fn detection_rate(sample: &MetricsSample) -> Result<Percent, MetricsError> {
    sample.check()?;
    if sample.total_attempts == 0 {
        return Err(MetricsError::ZeroAttempts);
    }
    Ok(Percent::ratio(sample.blocked_exploits, sample.total_attempts))
}

/// "Not Detected" when nothing was blocked, else the percentage.
pub fn detection_display(rate: Percent) -> String {
    if rate.value() == 0.0 {
        NOT_DETECTED.to_string()
    } else {
        rate.display()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Adaptability {
    Fails = 1,
    Partial = 2,
    Full = 3,
}

impl Adaptability {
    pub fn score(self) -> u8 {
        self as u8
    }
}

impl From<Adaptability> for u8 {
    fn from(a: Adaptability) -> u8 {
        a.score()
    }
}

impl TryFrom<u8> for Adaptability {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Self::Fails),
            2 => Ok(Self::Partial),
            3 => Ok(Self::Full),
            other => Err(format!("adaptability score must be 1..=3, got {other}")),
        }
    }
}

/// 3 if Worked on every counted profile, 1 if on none, else 2.
/// Environment-unsupported profiles are not counted.
pub fn adaptability(verdicts: &[Verdict]) -> Result<Adaptability, MetricsError> {
    let counted: Vec<_> = verdicts.iter().filter(|v| !v.is_environment_unsupported()).collect();
    if counted.is_empty() {
        return Err(MetricsError::AllEnvironmentLimited);
    }
    let worked = counted.iter().filter(|v| ***v == Verdict::Worked).count();
    Ok(match worked {
        0 => Adaptability::Fails,
        n if n == counted.len() => Adaptability::Full,
        _ => Adaptability::Partial,
    })
}

/// Counters over final verdicts; environment-unsupported outcomes are skipped.
pub fn sample_from_verdicts(verdicts: &[Verdict]) -> MetricsSample {
    let mut s = MetricsSample { successful_executions: 0, blocked_exploits: 0, total_attempts: 0 };
    for v in verdicts {
        match v {
            Verdict::EnvironmentUnsupported { .. } => continue,
            Verdict::Worked => s.successful_executions += 1,
            Verdict::Blocked { .. } => s.blocked_exploits += 1,
            Verdict::NotWorked => {}
        }
        s.total_attempts += 1;
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub step_id: String,
    pub feature: String,
    pub sample: MetricsSample,
    pub success_rate: f64,
    pub success_display: String,
    pub detection_rate: f64,
    pub detection_display: String,
    pub adaptability: Adaptability,
    pub ethical_risk: RiskLevel,
    pub ethical_risk_display: String,
    pub environment_limited: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub step_id: String,
    pub feature: String,
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimitationEntry {
    pub step_id: String,
    pub feature: String,
    /// Distinct explanations across profiles, in column order.
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub run_id: String,
    pub plan: String,
    pub devices: Vec<String>,
    pub verdict_matrix: Vec<MatrixRow>,
    pub feature_metrics: Vec<FeatureMetrics>,
    pub limitations: Vec<LimitationEntry>,
}

/// Builds both report tables from a completed run.
pub fn build_report(run: &RunRecord, plan: &PlanGraph) -> Result<ReportDocument, MetricsError> {
    if run.status != RunStatus::Completed {
        return Err(MetricsError::NotCompleted(run.run_id.clone()));
    }
    let campaign = run.campaign.as_ref().ok_or(MetricsError::MissingCampaign)?;
    let devices: Vec<String> = campaign.devices.iter().map(|d| d.profile.column_label()).collect();
    let mut matrix = Vec::new();
    let mut metrics = Vec::new();
    let mut limitations = Vec::new();

    for step in plan.steps.values() {
        if campaign.step_filter.as_ref().is_some_and(|f| !f.contains(&step.id)) {
            continue;
        }
        let records: Vec<_> = campaign.devices.iter().map(|d| run.step(&d.endpoint, &step.id)).collect();
        let verdicts: Vec<Option<Verdict>> = records.iter().map(|r| r.and_then(|r| r.final_verdict)).collect();
        matrix.push(MatrixRow {
            step_id: step.id.clone(),
            feature: step.title.clone(),
            cells: verdicts
                .iter()
                .map(|v| v.map(|v| v.cell_text().to_string()).unwrap_or_else(|| "Pending".into()))
                .collect(),
        });

        let finals: Vec<Verdict> = verdicts.iter().flatten().copied().collect();
        let limited = !records.is_empty()
            && records.iter().all(|r| {
                r.is_some_and(|r| {
                    r.limitation.is_some() || r.final_verdict.is_some_and(|v| v.is_environment_unsupported())
                })
            });
        if limited {
            let mut reasons: Vec<String> = Vec::new();
            for r in records.iter().flatten() {
                let reason = match (&r.limitation, r.final_verdict) {
                    (Some(l), _) => l.clone(),
                    (None, Some(v)) => v.cell_text().to_string(),
                    (None, None) => continue,
                };
                if !reasons.contains(&reason) {
                    reasons.push(reason);
                }
            }
            limitations.push(LimitationEntry { step_id: step.id.clone(), feature: step.title.clone(), reasons });
            continue;
        }

        let sample = sample_from_verdicts(&finals);
        let (Ok(success), Ok(detection), Ok(adapt)) =
            (success_rate(&sample), detection_rate(&sample), adaptability(&finals))
        else {
            continue;
        };
        let risk = risk_for_step(step);
        metrics.push(FeatureMetrics {
            step_id: step.id.clone(),
            feature: step.title.clone(),
            sample,
            success_rate: success.value(),
            success_display: success.display(),
            detection_rate: detection.value(),
            detection_display: detection_display(detection),
            adaptability: adapt,
            ethical_risk: risk,
            ethical_risk_display: risk.label().to_string(),
            environment_limited: false,
        });
    }

    Ok(ReportDocument {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: run.run_id.clone(),
        plan: plan.name.clone(),
        devices,
        verdict_matrix: matrix,
        feature_metrics: metrics,
        limitations,
    })
}

pub fn render_json(report: &ReportDocument) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn md_row(cells: impl IntoIterator<Item = impl AsRef<str>>) -> String {
    let cells: Vec<String> = cells.into_iter().map(|c| c.as_ref().replace('|', "\\|")).collect();
    format!("| {} |\n", cells.join(" | "))
}

fn md_rule(n: usize) -> String {
    format!("|{}\n", "---|".repeat(n))
}

pub fn render_markdown(report: &ReportDocument) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Campaign report `{}`\n", report.run_id);
    let _ = writeln!(out, "Plan: `{}`\n", report.plan);

    out.push_str("## Verdict matrix\n\n");
    out.push_str(&md_row(std::iter::once("Feature").chain(report.devices.iter().map(String::as_str))));
    out.push_str(&md_rule(report.devices.len() + 1));
    for row in &report.verdict_matrix {
        out.push_str(&md_row(std::iter::once(row.feature.as_str()).chain(row.cells.iter().map(String::as_str))));
    }

    out.push_str("\n## Feature metrics\n\n");
    out.push_str(&md_row(["Feature", "Success Rate", "Detection Rate", "Adaptability Score", "Ethical Risk Factor"]));
    out.push_str(&md_rule(5));
    for m in &report.feature_metrics {
        out.push_str(&md_row([
            m.feature.as_str(),
            &m.success_display,
            &m.detection_display,
            &m.adaptability.score().to_string(),
            &m.ethical_risk_display,
        ]));
    }

    if !report.limitations.is_empty() {
        out.push_str("\n## Environment limitations\n\n");
        out.push_str(&md_row(["Feature", "Reason"]));
        out.push_str(&md_rule(2));
        for l in &report.limitations {
            out.push_str(&md_row([l.feature.as_str(), &l.reasons.join("; ")]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{SecurityMechanism, UnsupportedReason};

    fn sample(s: u64, b: u64, t: u64) -> MetricsSample {
        MetricsSample::new(s, b, t).unwrap()
    }

    #[test]
    fn success_examples() {
        assert_eq!(success_rate(&sample(4, 0, 4)).unwrap().display(), "100%");
        assert_eq!(success_rate(&sample(2, 2, 4)).unwrap().display(), "50%");
        assert_eq!(success_rate(&sample(0, 0, 5)).unwrap().display(), "0%");
        assert_eq!(success_rate(&sample(0, 0, 0)), Err(MetricsError::ZeroAttempts));
    }

    #[test]
    fn detection_examples() {
        let r = detection_rate(&sample(2, 2, 4)).unwrap();
        assert_eq!(detection_display(r), "50%");
        let r = detection_rate(&sample(4, 0, 4)).unwrap();
        assert_eq!(r.value(), 0.0);
        assert_eq!(detection_display(r), NOT_DETECTED);
        assert_eq!(detection_rate(&sample(0, 5, 5)).unwrap().display(), "100%");
    }

    #[test]
    fn rounding_half_away() {
        assert_eq!(success_rate(&sample(1, 0, 8)).unwrap().value(), 12.5);
        assert_eq!(success_rate(&sample(1, 0, 3)).unwrap().display(), "33.3%");
        assert_eq!(success_rate(&sample(2, 0, 3)).unwrap().display(), "66.7%");
        // 100/16 = 6.25 -> 6.3
        assert_eq!(success_rate(&sample(1, 0, 16)).unwrap().value(), 6.3);
    }

    #[test]
    fn inconsistent_sample() {
        assert!(MetricsSample::new(3, 2, 4).is_err());
    }

    #[test]
    fn adaptability_examples() {
        use Verdict::*;
        assert_eq!(adaptability(&[Worked; 4]).unwrap(), Adaptability::Full);
        assert_eq!(adaptability(&[NotWorked, Worked, Worked, NotWorked]).unwrap(), Adaptability::Partial);
        assert_eq!(adaptability(&[NotWorked; 4]).unwrap(), Adaptability::Fails);
        let gated = EnvironmentUnsupported { reason: UnsupportedReason::FastbootNotAvailable };
        assert_eq!(adaptability(&[gated, Worked]).unwrap(), Adaptability::Full);
        assert_eq!(adaptability(&[gated; 2]), Err(MetricsError::AllEnvironmentLimited));
        let blocked = Blocked { mechanism: SecurityMechanism::Selinux };
        assert_eq!(adaptability(&[blocked, Worked]).unwrap(), Adaptability::Partial);
    }

    #[test]
    fn adaptability_serializes_as_number() {
        assert_eq!(serde_json::to_string(&Adaptability::Partial).unwrap(), "2");
        assert_eq!(serde_json::from_str::<Adaptability>("3").unwrap(), Adaptability::Full);
        assert!(serde_json::from_str::<Adaptability>("4").is_err());
    }

    #[test]
    fn verdict_counters() {
        use Verdict::*;
        let v = [Worked, Blocked { mechanism: SecurityMechanism::Selinux }, NotWorked, Worked];
        assert_eq!(sample_from_verdicts(&v), sample(2, 1, 4));
    }
}
