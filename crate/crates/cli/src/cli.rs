//! Command-line surface. Exit codes: 0 ok, 1 campaign or input error, 2 usage.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use droidprobe::approval::{ApprovalPolicy, OperatorKind};
use droidprobe::config::{load_plan_file, load_sim_dir, ServiceConfig};
use droidprobe::device::{DeviceEndpoint, DeviceHub, EndpointFamily};
use droidprobe::engine::{AutoOperator, Campaign, Engine, EventSink, NullSink, Operator, RunRecord, RunStatus, MAX_RETRY_BUDGET};
use droidprobe::llm::{PromptStyle, ProviderConfig};
use droidprobe::metrics::{build_report, render_json, render_markdown};
use droidprobe::plan::{canonical_plan, DeviceProfile};
use droidprobe::store::{replay_file, RunStore, EVENT_LOG};

use crate::api::{self, ServiceState};
use crate::operator::TerminalOperator;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "droidprobe", version, about = "LLM-assisted Android penetration-test orchestration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Attack-plan documents.
    Plan {
        #[command(subcommand)]
        command: PlanCommand,
    },
    /// Run campaigns.
    Campaign {
        #[command(subcommand)]
        command: CampaignCommand,
    },
    /// Device endpoints.
    Devices {
        #[command(subcommand)]
        command: DevicesCommand,
    },
    /// Reports from a data directory.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PlanCommand {
    /// Parse and check a plan; print its outline.
    Validate { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum CampaignCommand {
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StyleArg {
    General,
    Structured,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProviderArg {
    Stub,
    Http,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Plan document; the bundled Android plan when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Comma-separated endpoints: `sim:<profile>`, `adb://host:port/serial`, `adbcli:<serial>`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub devices: Vec<String>,
    #[arg(long, value_enum, default_value = "structured")]
    pub style: StyleArg,
    #[arg(long, value_enum, default_value = "stub")]
    pub provider: ProviderArg,
    /// Chat-completion base URL (http provider).
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long, default_value = "gpt-4o")]
    pub model: String,
    /// Environment variable that holds the provider API key.
    #[arg(long, default_value = "DROIDPROBE_LLM_KEY")]
    pub credential_env: String,
    /// Approval policy file; manual approval on this terminal when omitted.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(0..=MAX_RETRY_BUDGET as i64))]
    pub retries: u32,
    /// Write `<run-id>.json` and `<run-id>.md` here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Persist events to this data directory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Simulator spec directory; bundled profiles when omitted.
    #[arg(long)]
    pub sim_dir: Option<PathBuf>,
    /// Profile for a real endpoint, as `ENDPOINT=profile.toml`. Repeatable.
    #[arg(long = "device-profile")]
    pub device_profiles: Vec<String>,
    /// Restrict the run to these step ids.
    #[arg(long, value_delimiter = ',')]
    pub steps: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum DevicesCommand {
    List {
        /// Query an ADB server (`host:port`) instead of the simulators.
        #[arg(long, conflicts_with = "adb_cli")]
        adb_server: Option<String>,
        /// Query the local `adb` binary.
        #[arg(long)]
        adb_cli: bool,
        #[arg(long)]
        sim_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Md,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    Render {
        run_id: String,
        #[arg(long, value_enum, default_value = "md")]
        format: FormatArg,
        #[arg(long, default_value = "droidprobe-data")]
        data_dir: PathBuf,
    },
}

/// Printable failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn failed(message: impl ToString) -> Self {
        Self { code: EXIT_FAILURE, message: message.to_string() }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Plan { command: PlanCommand::Validate { file } } => plan_validate(&file, out),
        Command::Campaign { command: CampaignCommand::Run(args) } => campaign_run(args, out),
        Command::Devices { command: DevicesCommand::List { adb_server, adb_cli, sim_dir } } => {
            devices_list(adb_server, adb_cli, sim_dir, out)
        }
        Command::Report { command: ReportCommand::Render { run_id, format, data_dir } } => {
            report_render(&run_id, format, &data_dir, out)
        }
        Command::Serve { config } => serve(&config),
    }
}

fn plan_validate(file: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let plan = load_plan_file(file).map_err(Failure::failed)?;
    let _ = writeln!(out, "plan `{}`: {} steps, valid", plan.name, plan.len());
    let _ = write!(out, "{}", plan.serialize_flowchart());
    Ok(())
}

fn hub_from(sim_dir: Option<&Path>) -> Result<DeviceHub, Failure> {
    match sim_dir {
        None => Ok(DeviceHub::with_default_simulators()),
        Some(dir) => {
            let mut hub = DeviceHub::empty();
            for spec in load_sim_dir(dir).map_err(Failure::failed)? {
                hub.register_simulator(spec);
            }
            Ok(hub)
        }
    }
}

fn campaign_run(args: RunArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let plan = match &args.plan {
        Some(p) => load_plan_file(p).map_err(Failure::failed)?,
        None => canonical_plan(),
    };
    let mut hub = hub_from(args.sim_dir.as_deref())?;
    for spec in &args.device_profiles {
        let (endpoint, file) = spec
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--device-profile `{spec}` is not ENDPOINT=FILE")))?;
        let endpoint: DeviceEndpoint = endpoint.parse().map_err(|e| Failure::usage(format!("{e}")))?;
        let text = std::fs::read_to_string(file).map_err(|e| Failure::failed(format!("{file}: {e}")))?;
        let profile: DeviceProfile = toml::from_str(&text).map_err(|e| Failure::failed(format!("{file}: {e}")))?;
        profile.validate().map_err(|e| Failure::failed(format!("{file}: {e}")))?;
        hub.register_real_profile(&endpoint, profile);
    }
    let devices = args
        .devices
        .iter()
        .map(|d| d.parse::<DeviceEndpoint>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let (policy, operator_kind) = match &args.policy {
        Some(p) => ApprovalPolicy::load(p).map_err(Failure::failed)?,
        None => (ApprovalPolicy::default(), OperatorKind::Terminal),
    };
    let operator: Arc<dyn Operator> = match operator_kind {
        OperatorKind::Auto => Arc::new(AutoOperator),
        OperatorKind::Terminal => Arc::new(TerminalOperator::new(
            std::io::BufReader::new(std::io::stdin()),
            std::io::stderr(),
            whoami(),
        )),
        OperatorKind::External => {
            return Err(Failure::usage("policy operator `external` needs the HTTP service (`droidprobe serve`)"))
        }
    };
    let provider = match args.provider {
        ProviderArg::Stub => ProviderConfig::stub(),
        ProviderArg::Http => {
            let base = args.base_url.clone().ok_or_else(|| Failure::usage("--provider http requires --base-url"))?;
            let cfg = ProviderConfig::http(base, args.model.clone(), args.credential_env.clone());
            cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
            cfg
        }
    };

    let mut campaign = Campaign::new(Arc::new(plan), devices);
    campaign.prompt_style = match args.style {
        StyleArg::General => PromptStyle::General,
        StyleArg::Structured => PromptStyle::Structured,
    };
    campaign.provider = provider;
    campaign.policy = Arc::new(policy);
    campaign.retry_budget = args.retries;
    if !args.steps.is_empty() {
        campaign.step_filter = Some(args.steps.iter().cloned().collect());
    }

    let sink: Arc<dyn EventSink> = match &args.data_dir {
        Some(dir) => Arc::new(RunStore::open(dir).map_err(Failure::failed)?),
        None => Arc::new(NullSink),
    };
    let engine = Engine::new(Arc::new(hub)).with_operator(operator).with_sink(sink);
    let run = engine.run_campaign(&campaign).map_err(|e| match e.field_path() {
        Some(field) => Failure::failed(format!("{field}: {e}")),
        None => Failure::failed(e),
    })?;
    finish_run(&run, args.report.as_deref(), out)
}

fn finish_run(run: &RunRecord, report_dir: Option<&Path>, out: &mut dyn Write) -> Result<(), Failure> {
    if run.status != RunStatus::Completed {
        return Err(Failure::failed(format!(
            "run {} aborted: {}",
            run.run_id,
            run.abort_reason.as_deref().unwrap_or("unknown reason")
        )));
    }
    let plan = run.plan().map_err(Failure::failed)?;
    let report = build_report(run, &plan).map_err(Failure::failed)?;
    let md = render_markdown(&report);
    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::failed(format!("{}: {e}", dir.display())))?;
        for (ext, body) in [("json", render_json(&report)), ("md", md.clone())] {
            let path = dir.join(format!("{}.{ext}", run.run_id));
            std::fs::write(&path, body).map_err(|e| Failure::failed(format!("{}: {e}", path.display())))?;
        }
    }
    let _ = writeln!(out, "run {}", run.run_id);
    let _ = write!(out, "{md}");
    Ok(())
}

fn whoami() -> String {
    std::env::var("USER").ok().filter(|u| !u.is_empty()).unwrap_or_else(|| "terminal".into())
}

fn devices_list(adb_server: Option<String>, adb_cli: bool, sim_dir: Option<PathBuf>, out: &mut dyn Write) -> Result<(), Failure> {
    let hub = hub_from(sim_dir.as_deref())?;
    let family = match (adb_server, adb_cli) {
        (Some(addr), _) => {
            let (host, port) = addr
                .rsplit_once(':')
                .and_then(|(h, p)| Some((h.to_string(), p.parse().ok()?)))
                .ok_or_else(|| Failure::usage(format!("--adb-server `{addr}` is not host:port")))?;
            EndpointFamily::AdbServer { host, port }
        }
        (None, true) => EndpointFamily::AdbCli,
        (None, false) => {
            for p in hub.simulator_profiles() {
                let _ = writeln!(out, "sim:{}\t{}\t{}", p.name, p.column_label(), p.summary());
            }
            return Ok(());
        }
    };
    for d in hub.list_devices(&family).map_err(Failure::failed)? {
        let _ = writeln!(out, "{}\t{}", d.serial, d.state);
    }
    Ok(())
}

fn report_render(run_id: &str, format: FormatArg, data_dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let replay = replay_file(&data_dir.join(EVENT_LOG)).map_err(Failure::failed)?;
    if let Some(c) = &replay.corruption {
        eprintln!("warning: event log unreadable from byte {} (line {}): {}", c.offset, c.line, c.message);
    }
    let run = replay.runs.get(run_id).ok_or_else(|| Failure::failed(format!("unknown run `{run_id}`")))?;
    let plan = run.plan().map_err(Failure::failed)?;
    let report = build_report(run, &plan).map_err(Failure::failed)?;
    let text = match format {
        FormatArg::Json => render_json(&report),
        FormatArg::Md => render_markdown(&report),
    };
    let _ = write!(out, "{text}");
    Ok(())
}

fn serve(config: &Path) -> Result<(), Failure> {
    let cfg = ServiceConfig::load(config).map_err(Failure::failed)?;
    let addr = cfg.listen_addr().map_err(Failure::failed)?;
    let state = Arc::new(ServiceState::from_config(&cfg).map_err(Failure::failed)?);
    let rt = tokio::runtime::Runtime::new().map_err(Failure::failed)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        api::serve(state, listener).await
    })
    .map_err(Failure::failed)
}
