//! Bundled stub fixtures against the extractor, and report rendering consistency.

use std::sync::Arc;

use droidprobe::device::{DeviceEndpoint, DeviceHub};
use droidprobe::engine::{Campaign, Engine};
use droidprobe::llm::{LlmResponse, StubFixtures};
use droidprobe::metrics::{adaptability, build_report, render_json, render_markdown, sample_from_verdicts, Adaptability};
use droidprobe::plan::{canonical_plan, SecurityMechanism, UnsupportedReason, Verdict};
use droidprobe::script::{extract_scripts, ScriptKind};
use proptest::prelude::*;

fn kind_label(kind: ScriptKind) -> &'static str {
    match kind {
        ScriptKind::Rooting => "rooting",
        ScriptKind::Exploit => "exploit",
        ScriptKind::Validation => "validation",
    }
}

#[test]
fn extractor_agrees_with_reviewer_labels() {
    let plan = canonical_plan();
    let fixtures = StubFixtures::bundled();
    let mut checked = 0;
    for rec in fixtures.records() {
        let step = plan.step(&rec.step_id).unwrap_or_else(|| panic!("fixture for unknown step {}", rec.step_id));
        let response = LlmResponse {
            raw_text: rec.text.clone(),
            provider_id: "stub".into(),
            latency_ms: 0,
            session_id: "s".into(),
        };
        let scripts = extract_scripts(&response, step, rec.attempt).unwrap();
        let got: Vec<&str> = scripts.iter().map(|s| kind_label(s.kind)).collect();
        assert_eq!(got, rec.kinds, "{} / {:?} / {}", rec.step_id, rec.root_state, rec.attempt);
        checked += 1;
    }
    assert_eq!(checked, 30);
}

fn arb_verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![
        Just(Verdict::Worked),
        Just(Verdict::NotWorked),
        Just(Verdict::EnvironmentUnsupported { reason: UnsupportedReason::FastbootNotAvailable }),
        Just(Verdict::Blocked { mechanism: SecurityMechanism::Selinux }),
    ]
}

proptest! {
    #[test]
    fn adaptability_ignores_profile_order(vs in proptest::collection::vec(arb_verdict(), 1..8).prop_shuffle(), seed in any::<u64>()) {
        let mut shuffled = vs.clone();
        let n = shuffled.len();
        shuffled.rotate_left((seed as usize) % n);
        prop_assert_eq!(adaptability(&vs), adaptability(&shuffled));
        prop_assert_eq!(sample_from_verdicts(&vs), sample_from_verdicts(&shuffled));

        let counted: Vec<_> = vs.iter().filter(|v| !v.is_environment_unsupported()).collect();
        let expected = if counted.is_empty() {
            None
        } else if counted.iter().all(|v| **v == Verdict::Worked) {
            Some(Adaptability::Full)
        } else if counted.iter().any(|v| **v == Verdict::Worked) {
            Some(Adaptability::Partial)
        } else {
            Some(Adaptability::Fails)
        };
        prop_assert_eq!(adaptability(&vs).ok(), expected);
    }
}

#[test]
fn json_and_markdown_tell_the_same_story() {
    let hub = Arc::new(DeviceHub::with_default_simulators());
    let plan = Arc::new(canonical_plan());
    let devices = ["android-13-unrooted", "android-11-rooted", "android-12-rooted", "android-14-unrooted"]
        .iter()
        .map(|d| DeviceEndpoint::simulated(*d))
        .collect();
    let c = Campaign::new(plan.clone(), devices);
    let run = Engine::new(hub).run_campaign(&c).unwrap();
    let report = build_report(&run, &plan).unwrap();
    let json: serde_json::Value = serde_json::from_str(&render_json(&report)).unwrap();
    let md = render_markdown(&report);

    let matrix = json["verdict_matrix"].as_array().unwrap();
    assert_eq!(matrix.len(), plan.len());
    for row in matrix {
        let cells: Vec<&str> = row["cells"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
        let line = format!("| {} | {} |", row["feature"].as_str().unwrap(), cells.join(" | "));
        assert!(md.contains(&line), "missing matrix row {line}");
    }
    for m in json["feature_metrics"].as_array().unwrap() {
        let line = format!(
            "| {} | {} | {} | {} | {} |",
            m["feature"].as_str().unwrap(),
            m["success_display"].as_str().unwrap(),
            m["detection_display"].as_str().unwrap(),
            m["adaptability"].as_u64().unwrap(),
            m["ethical_risk_display"].as_str().unwrap(),
        );
        assert!(md.contains(&line), "missing metrics row {line}");
    }
    let limited = json["limitations"].as_array().unwrap();
    assert_eq!(md.contains("## Environment limitations"), !limited.is_empty());
    for l in limited {
        assert!(md.contains(&format!("| {} |", l["feature"].as_str().unwrap())));
    }
}
