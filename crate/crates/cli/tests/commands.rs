//! The `droidprobe` binary: exit codes, reports and replay.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_droidprobe"));
    c.env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SIMS: &str = "sim:android-13-unrooted,sim:android-11-rooted,sim:android-12-rooted,sim:android-14-unrooted";

#[test]
fn plan_validate_bundled_plan() {
    let plan = repo().join("crates/core/assets/plans/android-rooting.plan");
    let o = run(&["plan", "validate", plan.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("plan `android-rooting`: 15 steps, valid\n"));
    assert!(out.contains("  bootloader_check: Check Bootloader Status [requires: backup]"));
}

#[test]
fn plan_validate_reports_cycles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cyclic.plan");
    let step = |id: &str, pre: &str| {
        format!(
            "[[step]]\nid = \"{id}\"\ntitle = \"{id}\"\ncategory = \"adb_wifi\"\nprerequisites = [{pre}]\nautomation_level = \"fully_automated\"\nvalidation = {{ marker = \"m\", command = \"c\" }}\n"
        )
    };
    let doc = format!("[plan]\nname = \"loop\"\n{}{}{}", step("root", ""), step("a", "\"b\""), step("b", "\"a\""));
    std::fs::write(&path, doc).unwrap();
    let o = run(&["plan", "validate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cycle detected"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["campaign", "run", "--devices", "sim:android-11-rooted", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["campaign", "run"]).status.code(), Some(2));
    assert_eq!(run(&["campaign", "run", "--devices", "sim:android-11-rooted", "--retries", "9"]).status.code(), Some(2));
    assert_eq!(run(&["report", "render", "x", "--format", "pdf"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn campaign_run_writes_reports_that_replay_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let reports = dir.path().join("reports");
    let policy = repo().join("config/auto.policy");
    let o = run(&[
        "campaign", "run",
        "--devices", SIMS,
        "--policy", policy.to_str().unwrap(),
        "--report", reports.to_str().unwrap(),
        "--data-dir", data.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let run_id = out.lines().next().unwrap().strip_prefix("run ").unwrap().to_string();
    assert!(out.contains("## Verdict matrix"));
    let json = std::fs::read_to_string(reports.join(format!("{run_id}.json"))).unwrap();
    let md = std::fs::read_to_string(reports.join(format!("{run_id}.md"))).unwrap();

    let r = run(&["report", "render", &run_id, "--format", "json", "--data-dir", data.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    assert_eq!(stdout(&r), json);
    let r = run(&["report", "render", &run_id, "--format", "md", "--data-dir", data.to_str().unwrap()]);
    assert_eq!(stdout(&r), md);

    let r = run(&["report", "render", "run-missing", "--data-dir", data.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn external_operator_is_refused_on_the_command_line() {
    let policy = repo().join("config/manual.policy");
    let o = run(&["campaign", "run", "--devices", "sim:android-11-rooted", "--policy", policy.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_profile_is_a_campaign_error() {
    let policy = repo().join("config/auto.policy");
    let o = run(&["campaign", "run", "--devices", "sim:android-9", "--policy", policy.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("devices[0]"), "{}", stderr(&o));
}

#[test]
fn terminal_operator_reads_stdin() {
    let mut child = bin()
        .args(["campaign", "run", "--devices", "sim:android-11-rooted", "--steps", "backup", "--retries", "0"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all("y\n".repeat(10).as_bytes()).unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("approve? [y/n reason]"));
    assert!(stdout(&o).contains("| Backup Data | Worked |"), "{}", stdout(&o));

    // End of input rejects, so the step does not work.
    let o = bin()
        .args(["campaign", "run", "--devices", "sim:android-11-rooted", "--steps", "backup", "--retries", "0"])
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("| Backup Data | Not Worked |"), "{}", stdout(&o));
}

#[test]
fn devices_list_shows_bundled_simulators() {
    let o = run(&["devices", "list"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().all(|l| l.starts_with("sim:android-")));
}
