//! Python bindings: plans, simulator campaigns, reports, screening and the
//! ADB wire format.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use droidprobe::approval::{screen_body, ApprovalPolicy, ScreenOutcome};
use droidprobe::device::{protocol, DeviceEndpoint, DeviceHub};
use droidprobe::engine::{Campaign, Engine, RunRecord};
use droidprobe::llm::{LlmResponse, PromptStyle};
use droidprobe::metrics::{self, MetricsSample};
use droidprobe::plan::PlanGraph;
use droidprobe::script::extract_scripts as core_extract;
use droidprobe::store::{replay_file, RunStore, EVENT_LOG};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A validated attack plan.
#[pyclass(name = "Plan", module = "droidprobe", frozen)]
pub struct PyPlan {
    inner: Arc<PlanGraph>,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Plan(name={:?}, steps={})", self.inner.name, self.inner.len())
    }

    /// Step ids in document order.
    fn step_ids(&self) -> Vec<String> {
        self.inner.steps.keys().cloned().collect()
    }

    fn execution_order(&self) -> Vec<String> {
        self.inner.execution_order().into_iter().map(|s| s.id.clone()).collect()
    }

    fn eligible_steps(&self, completed: Vec<String>) -> PyResult<Vec<String>> {
        let done = completed.into_iter().collect();
        let steps = self.inner.eligible_steps(&done).map_err(value_err)?;
        Ok(steps.into_iter().map(|s| s.id.clone()).collect())
    }

    fn flowchart(&self) -> String {
        self.inner.serialize_flowchart()
    }

    fn to_document(&self) -> String {
        self.inner.to_document()
    }
}

/// The bundled Android rooting plan.
#[pyfunction]
fn canonical_plan() -> PyPlan {
    PyPlan { inner: Arc::new(droidprobe::plan::canonical_plan()) }
}

#[pyfunction]
fn load_plan(document: &str) -> PyResult<PyPlan> {
    droidprobe::plan::load_plan(document).map(|p| PyPlan { inner: Arc::new(p) }).map_err(value_err)
}

/// Names of the bundled simulator profiles.
#[pyfunction]
fn simulator_profiles() -> Vec<String> {
    DeviceHub::with_default_simulators().simulator_profiles().into_iter().map(|p| p.name).collect()
}

/// A finished (or aborted) campaign run.
#[pyclass(name = "Run", module = "droidprobe", frozen)]
pub struct PyRun {
    inner: RunRecord,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn run_id(&self) -> &str {
        &self.inner.run_id
    }

    #[getter]
    fn status(&self) -> String {
        serde_json::to_value(self.inner.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
    }

    fn __repr__(&self) -> String {
        format!("Run(run_id={:?}, status={:?})", self.inner.run_id, self.status())
    }

    /// Verdict-matrix cell text for one device and step, if the step ran.
    fn final_verdict(&self, device: &str, step_id: &str) -> Option<&'static str> {
        self.inner.final_verdict(device, step_id).map(|v| v.cell_text())
    }

    /// `{device: {step_id: cell text}}` over every finalized step.
    fn verdicts(&self) -> BTreeMap<String, BTreeMap<String, &'static str>> {
        self.inner
            .steps
            .iter()
            .map(|(d, steps)| {
                let cells = steps
                    .iter()
                    .filter_map(|(s, rec)| rec.final_verdict.map(|v| (s.clone(), v.cell_text())))
                    .collect();
                (d.clone(), cells)
            })
            .collect()
    }

    /// Attempt count per `(device, step_id)`.
    fn attempts(&self) -> BTreeMap<(String, String), usize> {
        self.inner
            .steps
            .iter()
            .flat_map(|(d, steps)| steps.iter().map(move |(s, rec)| ((d.clone(), s.clone()), rec.attempts.len())))
            .collect()
    }

    fn unapproved_executions(&self) -> usize {
        self.inner.unapproved_executions().len()
    }

    fn report_json(&self) -> PyResult<String> {
        Ok(metrics::render_json(&self.report()?))
    }

    fn report_markdown(&self) -> PyResult<String> {
        Ok(metrics::render_markdown(&self.report()?))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("run serializes")
    }
}

impl PyRun {
    fn report(&self) -> PyResult<metrics::ReportDocument> {
        let plan = self.inner.plan().map_err(runtime_err)?;
        metrics::build_report(&self.inner, &plan).map_err(runtime_err)
    }
}

/// Runs a campaign against simulator endpoints with the stub provider and
/// unattended approval. Deny rules still apply.
#[pyfunction]
#[pyo3(signature = (devices, *, plan=None, steps=None, retry_budget=2, style="structured", data_dir=None))]
fn run_campaign(
    py: Python<'_>,
    devices: Vec<String>,
    plan: Option<PyRef<'_, PyPlan>>,
    steps: Option<Vec<String>>,
    retry_budget: u32,
    style: &str,
    data_dir: Option<PathBuf>,
) -> PyResult<PyRun> {
    let endpoints = devices
        .iter()
        .map(|d| d.parse::<DeviceEndpoint>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    if let Some(e) = endpoints.iter().find(|e| e.is_real()) {
        return Err(PyValueError::new_err(format!("{e}: only simulator endpoints can be driven from Python")));
    }
    let plan = plan.map(|p| p.inner.clone()).unwrap_or_else(|| Arc::new(droidprobe::plan::canonical_plan()));
    let mut campaign = Campaign::new(plan, endpoints);
    campaign.prompt_style = style.parse::<PromptStyle>().map_err(PyValueError::new_err)?;
    campaign.retry_budget = retry_budget;
    campaign.step_filter = steps.map(|s| s.into_iter().collect());
    campaign.policy = Arc::new(ApprovalPolicy::default());
    let store = data_dir.map(RunStore::open).transpose().map_err(runtime_err)?;
    let run = py.detach(move || {
        let mut engine = Engine::new(Arc::new(DeviceHub::with_default_simulators()));
        if let Some(store) = store {
            engine = engine.with_sink(Arc::new(store));
        }
        engine.run_campaign(&campaign)
    });
    let run = run.map_err(|e| match e.field_path() {
        Some(field) => PyValueError::new_err(format!("{field}: {e}")),
        None => runtime_err(e),
    })?;
    Ok(PyRun { inner: run })
}

/// Rebuilds a run from an event log and renders its report.
#[pyfunction]
#[pyo3(signature = (data_dir, run_id, format="md"))]
fn replay_report(data_dir: PathBuf, run_id: &str, format: &str) -> PyResult<String> {
    let replay = replay_file(&data_dir.join(EVENT_LOG)).map_err(runtime_err)?;
    let run = replay.runs.get(run_id).ok_or_else(|| PyValueError::new_err(format!("unknown run `{run_id}`")))?;
    let plan = run.plan().map_err(runtime_err)?;
    let report = metrics::build_report(run, &plan).map_err(runtime_err)?;
    match format {
        "md" => Ok(metrics::render_markdown(&report)),
        "json" => Ok(metrics::render_json(&report)),
        other => Err(PyValueError::new_err(format!("unknown format `{other}` (expected json|md)"))),
    }
}

/// Success rate in percent, rounded to one decimal.
#[pyfunction]
fn success_rate(successful: u64, blocked: u64, total: u64) -> PyResult<f64> {
    let s = MetricsSample::new(successful, blocked, total).map_err(value_err)?;
    metrics::success_rate(&s).map(|p| p.value()).map_err(value_err)
}

/// Detection rate in percent, rounded to one decimal.
#[pyfunction]
fn detection_rate(successful: u64, blocked: u64, total: u64) -> PyResult<f64> {
    let s = MetricsSample::new(successful, blocked, total).map_err(value_err)?;
    metrics::detection_rate(&s).map(|p| p.value()).map_err(value_err)
}

/// Id of the first default deny rule that matches `body`, if any.
#[pyfunction]
fn screen(body: &str) -> Option<String> {
    match screen_body(body, &ApprovalPolicy::default()) {
        ScreenOutcome::Cleared => None,
        ScreenOutcome::Denied { rule_id } => Some(rule_id),
    }
}

/// Scripts extracted from a completion for one plan step, as dicts.
#[pyfunction]
#[pyo3(signature = (text, step_id, plan=None))]
fn extract_scripts(text: &str, step_id: &str, plan: Option<PyRef<'_, PyPlan>>) -> PyResult<Vec<BTreeMap<&'static str, String>>> {
    let plan = plan.map(|p| p.inner.clone()).unwrap_or_else(|| Arc::new(droidprobe::plan::canonical_plan()));
    let step = plan.step(step_id).ok_or_else(|| PyValueError::new_err(format!("unknown step `{step_id}`")))?;
    let response = LlmResponse { raw_text: text.to_string(), provider_id: "python".into(), latency_ms: 0, session_id: "py".into() };
    let scripts = core_extract(&response, step, 1).map_err(value_err)?;
    Ok(scripts
        .into_iter()
        .map(|s| {
            let tag = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
            BTreeMap::from([
                ("kind", tag(serde_json::to_value(s.kind).unwrap())),
                ("interpreter", tag(serde_json::to_value(s.interpreter).unwrap())),
                ("risk", s.risk.label().to_string()),
                ("body", s.body),
            ])
        })
        .collect())
}

/// Frames an ADB host service request (`%04x` length + service).
#[pyfunction]
fn frame_request<'py>(py: Python<'py>, service: &str) -> PyResult<Bound<'py, PyBytes>> {
    protocol::frame_request(service).map(|b| PyBytes::new(py, &b)).map_err(value_err)
}

/// Splits a length-prefixed payload from its trailing bytes.
#[pyfunction]
fn parse_length_prefixed<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyBytes>)> {
    let (payload, rest) = protocol::parse_length_prefixed(data).map_err(value_err)?;
    Ok((PyBytes::new(py, payload), PyBytes::new(py, rest)))
}

/// `(serial, state)` pairs from a `host:devices` payload.
#[pyfunction]
fn parse_device_list(payload: &str) -> Vec<(String, String)> {
    protocol::parse_device_list(payload)
}

#[pymodule]
#[pyo3(name = "droidprobe")]
fn droidprobe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlan>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(canonical_plan, m)?)?;
    m.add_function(wrap_pyfunction!(load_plan, m)?)?;
    m.add_function(wrap_pyfunction!(simulator_profiles, m)?)?;
    m.add_function(wrap_pyfunction!(run_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(replay_report, m)?)?;
    m.add_function(wrap_pyfunction!(success_rate, m)?)?;
    m.add_function(wrap_pyfunction!(detection_rate, m)?)?;
    m.add_function(wrap_pyfunction!(screen, m)?)?;
    m.add_function(wrap_pyfunction!(extract_scripts, m)?)?;
    m.add_function(wrap_pyfunction!(frame_request, m)?)?;
    m.add_function(wrap_pyfunction!(parse_length_prefixed, m)?)?;
    m.add_function(wrap_pyfunction!(parse_device_list, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
