//! The `/v1` API against a live server on an ephemeral port.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use droidprobe::approval::{ApprovalPolicy, OperatorKind};
use droidprobe::device::{DeviceEndpoint, DeviceHub};
use droidprobe::engine::{Campaign, Engine};
use droidprobe::llm::{HttpReply, HttpTransport, LlmGateway, ProviderConfig, TransportError};
use droidprobe::plan::{canonical_plan, Verdict};
use droidprobe::store::RunStore;
use droidprobe_cli::api::{router, ServiceState};
use reqwest::StatusCode;
use serde_json::{json, Value};

const SIMS: [&str; 4] = ["sim:android-13-unrooted", "sim:android-11-rooted", "sim:android-12-rooted", "sim:android-14-unrooted"];

struct Server {
    base: String,
    state: Arc<ServiceState>,
    client: reqwest::Client,
    _dir: tempfile::TempDir,
}

async fn start(configure: impl FnOnce(ServiceState) -> ServiceState) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(RunStore::open(dir.path()).unwrap());
    let state = ServiceState::new(
        store,
        Arc::new(DeviceHub::with_default_simulators()),
        canonical_plan(),
        ApprovalPolicy::default(),
        ProviderConfig::stub(),
    );
    let state = Arc::new(configure(state));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { base, state, client: reqwest::Client::new(), _dir: dir }
}

impl Server {
    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn get_text(&self, path: &str) -> (StatusCode, String) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.text().await.unwrap())
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn wait_finished(&self, run_id: &str) -> Value {
        for _ in 0..2000 {
            let (_, run) = self.get(&format!("/runs/{run_id}")).await;
            if run["status"] == "completed" || run["status"] == "aborted" {
                return run;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("run {run_id} did not finish");
    }
}

/// Reads an SSE body to its end; returns (id, event name, data) triples.
async fn read_sse(resp: reqwest::Response) -> Vec<(u64, String, Value)> {
    let mut resp = resp;
    let mut buf = String::new();
    while let Some(chunk) = resp.chunk().await.unwrap() {
        buf.push_str(&String::from_utf8_lossy(&chunk));
    }
    buf.split("\n\n")
        .filter_map(|frame| {
            let mut id = None;
            let mut name = String::new();
            let mut data = String::new();
            for line in frame.lines() {
                if let Some(v) = line.strip_prefix("id: ").or_else(|| line.strip_prefix("id:")) {
                    id = v.trim().parse().ok();
                } else if let Some(v) = line.strip_prefix("event: ").or_else(|| line.strip_prefix("event:")) {
                    name = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("data: ").or_else(|| line.strip_prefix("data:")) {
                    data.push_str(v);
                }
            }
            Some((id?, name, serde_json::from_str(&data).ok()?))
        })
        .collect()
}

fn final_matrix(run: &Value) -> BTreeMap<(String, String), Value> {
    let mut out = BTreeMap::new();
    for (device, steps) in run["steps"].as_object().unwrap() {
        for (step, rec) in steps.as_object().unwrap() {
            out.insert((device.clone(), step.clone()), rec["final_verdict"].clone());
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn validation_errors_carry_field_paths() {
    let s = start(|st| st).await;
    let (code, body) = s.post("/campaigns", json!({ "devices": ["sim:android-11-rooted", "sim:android-9"] })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["field"], "devices[1]");
    let (code, body) = s.post("/campaigns", json!({ "devices": ["adb://h:99999/x"] })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["field"], "devices[0]");
    let (code, body) = s.post("/campaigns", json!({ "devices": [] })).await;
    assert_eq!((code, body["error"]["field"].clone()), (StatusCode::BAD_REQUEST, json!("devices")));
    let (code, body) = s.post("/campaigns", json!({ "devices": SIMS, "retry_budget": 9 })).await;
    assert_eq!((code, body["error"]["field"].clone()), (StatusCode::BAD_REQUEST, json!("retry_budget")));
    let (code, body) = s.post("/campaigns", json!({ "devices": SIMS, "steps": ["nope"] })).await;
    assert_eq!((code, body["error"]["field"].clone()), (StatusCode::BAD_REQUEST, json!("step_filter")));
    let (code, _) = s.post("/campaigns", json!({ "devices": SIMS, "colour": "red" })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = s.post("/campaigns", json!({ "devices": ["adb://127.0.0.1:5037/emulator-5554"] })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);

    assert_eq!(s.get("/runs/run-nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(s.get_text("/runs/run-nope/events").await.0, StatusCode::NOT_FOUND);
    assert_eq!(s.get_text("/runs/run-nope/report").await.0, StatusCode::NOT_FOUND);
    let (code, _) = s.post("/tickets/tkt-999999/resolve", json!({ "decision": "approve", "operator": "a" })).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert_eq!(s.state.store.runs().len(), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn manual_campaign_through_the_api() {
    let s = start(|st| st).await;
    let (code, created) = s.post("/campaigns", json!({ "request_key": "c-1", "devices": SIMS })).await;
    assert_eq!(code, StatusCode::ACCEPTED, "{created}");
    let run_id = created["run_id"].as_str().unwrap().to_string();
    let (code, again) = s.post("/campaigns", json!({ "request_key": "c-1", "devices": SIMS })).await;
    assert_eq!((code, again), (StatusCode::ACCEPTED, created.clone()));

    // Workers are parked on tickets, so the report is not ready yet.
    let (code, body) = s.get(&format!("/runs/{run_id}/report")).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "not_completed");

    let events = s.client.get(format!("{}/runs/{run_id}/events", s.base)).send().await.unwrap();
    assert_eq!(events.status(), StatusCode::OK);
    let reader = tokio::spawn(read_sse(events));

    let mut first = true;
    let mut resolved = 0;
    loop {
        let (_, run) = s.get(&format!("/runs/{run_id}")).await;
        if run["status"] == "completed" {
            break;
        }
        let (_, list) = s.get("/tickets").await;
        for t in list["tickets"].as_array().unwrap() {
            let id = t["ticket_id"].as_str().unwrap();
            assert!(t["script"]["body"].is_string());
            let path = format!("/tickets/{id}/resolve");
            if first {
                first = false;
                let (code, body) = s
                    .post(&path, json!({ "decision": "approve", "operator": "carol", "edited_body": "adb shell rm -rf /" }))
                    .await;
                assert_eq!(code, StatusCode::BAD_REQUEST);
                assert_eq!(body["error"]["code"], "edit_denied");
                assert!(s.state.gate.ticket(id).unwrap().is_open());
                let (code, body) = s.post(&path, json!({ "decision": "approve", "operator": "" })).await;
                assert_eq!((code, body["error"]["field"].clone()), (StatusCode::BAD_REQUEST, json!("operator")));

                let key = json!({ "request_key": "r-1", "decision": "approve", "operator": "carol" });
                let (c1, b1) = s.post(&path, key.clone()).await;
                let (c2, b2) = s.post(&path, key).await;
                assert_eq!(c1, StatusCode::OK);
                assert_eq!((c1, &b1), (c2, &b2));
                let (c3, _) = s.post(&path, json!({ "request_key": "r-2", "decision": "reject", "operator": "carol", "reason": "late" })).await;
                assert_eq!(c3, StatusCode::CONFLICT);
            } else {
                let (code, _) = s.post(&path, json!({ "decision": "approve", "operator": "carol" })).await;
                assert!(code == StatusCode::OK || code == StatusCode::CONFLICT);
            }
            resolved += 1;
        }
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    assert!(resolved > 0);
    let run = s.wait_finished(&run_id).await;

    // The stream delivered the whole log for this run, once each, in order.
    let streamed = reader.await.unwrap();
    let logged = s.state.store.events(&run_id, 0);
    assert_eq!(streamed.iter().map(|e| e.0).collect::<Vec<_>>(), logged.iter().map(|e| e.seq).collect::<Vec<_>>());
    assert_eq!(streamed.last().unwrap().1, "run_completed");
    assert_eq!(streamed[0].1, "run_started");

    // Resuming after an id replays only what follows it.
    let mid = logged[logged.len() / 2].seq;
    let resumed = s
        .client
        .get(format!("{}/runs/{run_id}/events", s.base))
        .header("Last-Event-ID", mid.to_string())
        .send()
        .await
        .unwrap();
    let resumed = read_sse(resumed).await;
    assert_eq!(resumed.first().unwrap().0, logged.iter().find(|e| e.seq > mid).unwrap().seq);
    assert_eq!(resumed.len(), logged.iter().filter(|e| e.seq > mid).count());

    // Same verdicts as an unattended run.
    let campaign = Campaign::new(Arc::new(canonical_plan()), SIMS.iter().map(|d| d.parse::<DeviceEndpoint>().unwrap()).collect());
    let auto = Engine::new(Arc::new(DeviceHub::with_default_simulators())).run_campaign(&campaign).unwrap();
    let expected = final_matrix(&serde_json::to_value(&auto).unwrap());
    assert_eq!(final_matrix(&run), expected);
    assert_eq!(expected.len(), 60);

    let (code, report) = s.get(&format!("/runs/{run_id}/report?format=json")).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(report["verdict_matrix"].as_array().unwrap().len(), 15);
    let (code, md) = s.get_text(&format!("/runs/{run_id}/report?format=md")).await;
    assert_eq!(code, StatusCode::OK);
    assert!(md.contains("## Verdict matrix"));
    assert_eq!(s.get_text(&format!("/runs/{run_id}/report?format=pdf")).await.0, StatusCode::BAD_REQUEST);
    assert!(s.state.store.report_path(&run_id, "md").exists());

    let (_, all) = s.get("/tickets?open=false").await;
    assert!(all["tickets"].as_array().unwrap().iter().all(|t| !t["decision"].is_null()));
    let (_, list) = s.get("/campaigns").await;
    assert_eq!(list["runs"][0]["run_id"], run_id.as_str());
}

#[tokio::test(flavor = "multi_thread")]
async fn devices_and_single_step_generation() {
    let s = start(|st| st).await;
    let (code, devices) = s.get("/devices").await;
    assert_eq!(code, StatusCode::OK);
    let names: Vec<&str> = devices["devices"].as_array().unwrap().iter().map(|d| d["endpoint"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 4);
    assert!(names.contains(&"sim:android-11-rooted"));

    let req = json!({ "request_key": "g-1", "step_id": "magisk_sideload", "device": "sim:android-11-rooted", "style": "general" });
    let (code, g) = s.post("/generate", req.clone()).await;
    assert_eq!(code, StatusCode::OK, "{g}");
    assert!(!g["scripts"].as_array().unwrap().is_empty());
    assert!(!g["tickets"].as_array().unwrap().is_empty());
    assert!(!g["prompt"].as_str().unwrap().contains("backup: Backup Data"));
    let (_, again) = s.post("/generate", req).await;
    assert_eq!(again, g);
    assert_eq!(s.state.gate.tickets(true).len(), g["tickets"].as_array().unwrap().len());
    assert!(s.state.hub.recorder().executions().is_empty());

    let (code, body) = s.post("/generate", json!({ "step_id": "nope", "device": "sim:android-11-rooted" })).await;
    assert_eq!((code, body["error"]["field"].clone()), (StatusCode::BAD_REQUEST, json!("step_id")));
    let (code, body) = s.post("/generate", json!({ "step_id": "backup", "device": "sim:nope" })).await;
    assert_eq!((code, body["error"]["field"].clone()), (StatusCode::BAD_REQUEST, json!("device")));
}

#[tokio::test(flavor = "multi_thread")]
async fn bearer_token_is_enforced() {
    let s = start(|st| st.with_token("lab-token")).await;
    assert_eq!(s.get("/devices").await.0, StatusCode::UNAUTHORIZED);
    let r = s.client.get(format!("{}/devices", s.base)).bearer_auth("wrong").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = s.client.get(format!("{}/devices", s.base)).bearer_auth("lab-token").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn missing_provider_credential_is_503() {
    let s = start(|mut st| {
        st.provider = ProviderConfig::http("https://llm.invalid/v1", "m", "DROIDPROBE_TEST_UNSET_VARIABLE");
        st
    })
    .await;
    let (code, body) = s.post("/campaigns", json!({ "devices": SIMS })).await;
    assert_eq!(code, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"]["code"], "provider_unavailable");
    let (code, _) = s.post("/generate", json!({ "step_id": "backup", "device": "sim:android-11-rooted" })).await;
    assert_eq!(code, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test(flavor = "multi_thread")]
async fn cors_preflight_allows_configured_origin() {
    let s = start(|st| st.with_cors_origins(vec!["http://localhost:5173".into()])).await;
    let r = s
        .client
        .request(reqwest::Method::OPTIONS, format!("{}/tickets", s.base))
        .header("Origin", "http://localhost:5173")
        .header("Access-Control-Request-Method", "POST")
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers().get("access-control-allow-origin").unwrap(), "http://localhost:5173");
    let r = s.client.get(format!("{}/devices", s.base)).header("Origin", "http://evil.invalid").send().await.unwrap();
    assert!(r.headers().get("access-control-allow-origin").is_none());
}

struct Scripted;

const SECRET: &str = "sk-lab-fedcba9876543210";

impl HttpTransport for Scripted {
    fn post_json(&self, _url: &str, bearer: &str, _body: &Value, _t: Duration) -> Result<HttpReply, TransportError> {
        assert_eq!(bearer, SECRET);
        let content = "```bash\nadb shell ls /sdcard/pentest/backup\n```";
        Ok(HttpReply { status: 200, body: json!({ "choices": [{ "message": { "content": content } }] }).to_string() })
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn credential_never_appears_in_responses() {
    let provider = ProviderConfig::http("https://llm.invalid/v1", "lab-model", "DROIDPROBE_SECRET_VAR");
    let gateway = LlmGateway::new(provider.clone())
        .unwrap()
        .with_transport(Arc::new(Scripted))
        .with_env(Arc::new(|_| Some(SECRET.to_string())));
    let s = start(move |mut st| {
        st.provider = provider;
        st.with_gateway(gateway).with_operator(OperatorKind::Auto)
    })
    .await;
    let (code, created) = s.post("/campaigns", json!({ "devices": ["sim:android-11-rooted"], "steps": ["backup", "adb_wifi"] })).await;
    assert_eq!(code, StatusCode::ACCEPTED, "{created}");
    let run_id = created["run_id"].as_str().unwrap();
    let run = s.wait_finished(run_id).await;
    assert_eq!(run["status"], "completed");
    let mut seen = vec![run.to_string()];
    for path in [
        format!("/runs/{run_id}/events"),
        format!("/runs/{run_id}/report?format=json"),
        format!("/runs/{run_id}/report?format=md"),
        "/campaigns".into(),
        "/tickets?open=false".into(),
        "/devices".into(),
    ] {
        let (code, text) = s.get_text(&path).await;
        assert_eq!(code, StatusCode::OK, "{path}");
        seen.push(text);
    }
    seen.push(std::fs::read_to_string(s.state.store.log_path()).unwrap());
    assert!(seen.iter().all(|t| !t.contains(SECRET)));
    let verdict = &run["steps"]["sim:android-11-rooted"]["backup"]["final_verdict"];
    assert!(serde_json::from_value::<Verdict>(verdict.clone()).is_ok());
}
