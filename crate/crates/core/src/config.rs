//! Service configuration file.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! data_dir = "data"
//! plan_path = "plans/android-rooting.plan"    # optional, bundled plan otherwise
//! policy_path = "policy/lab.policy"           # optional, default policy otherwise
//! sim_dir = "sim"                             # optional, bundled profiles otherwise
//! cors_origins = ["http://localhost:5173"]
//! api_token_env = "DROIDPROBE_API_TOKEN"      # optional bearer token source
//!
//! [provider]
//! kind = "stub"
//! ```
//!
//! Relative paths resolve against the config file's directory. Secrets are
//! never read from this file, only named by environment variable.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::approval::{ApprovalError, ApprovalPolicy, OperatorKind};
use crate::device::{simulator, DeviceError, SimulatorSpec};
use crate::llm::{LlmError, ProviderConfig};
use crate::plan::{canonical_plan, load_plan, PlanError, PlanGraph};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("listen address `{0}` is not host:port")]
    Listen(String),
    #[error("{field}: path {path} does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("plan {path}: {source}")]
    Plan { path: PathBuf, source: PlanError },
    #[error(transparent)]
    Policy(#[from] ApprovalError),
    #[error(transparent)]
    Provider(#[from] LlmError),
    #[error("simulator spec {path}: {source}")]
    Sim { path: PathBuf, source: DeviceError },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub plan_path: Option<PathBuf>,
    #[serde(default)]
    pub policy_path: Option<PathBuf>,
    #[serde(default)]
    pub sim_dir: Option<PathBuf>,
    #[serde(default = "ProviderConfig::stub")]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub cors_origins: Vec<String>,
    #[serde(default)]
    pub api_token_env: Option<String>,
}

impl ServiceConfig {
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(base) = base_dir {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.data_dir);
            for p in [&mut cfg.plan_path, &mut cfg.policy_path, &mut cfg.sim_dir].into_iter().flatten() {
                fix(p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse(&text, path.parent())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen.parse().map_err(|_| ConfigError::Listen(self.listen.clone()))
    }

    /// Startup checks: listen address parses, referenced paths exist,
    /// provider config is well formed.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        for (field, path) in [("plan_path", &self.plan_path), ("policy_path", &self.policy_path), ("sim_dir", &self.sim_dir)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::MissingPath { field, path: p.clone() });
                }
            }
        }
        self.provider.validate()?;
        Ok(())
    }

    pub fn plan(&self) -> Result<PlanGraph, ConfigError> {
        match &self.plan_path {
            None => Ok(canonical_plan()),
            Some(p) => load_plan_file(p),
        }
    }

    pub fn policy(&self) -> Result<(ApprovalPolicy, OperatorKind), ConfigError> {
        match &self.policy_path {
            None => Ok((ApprovalPolicy::default(), OperatorKind::External)),
            Some(p) => Ok(ApprovalPolicy::load(p)?),
        }
    }

    pub fn simulators(&self) -> Result<Vec<SimulatorSpec>, ConfigError> {
        match &self.sim_dir {
            None => Ok(simulator::default_specs()),
            Some(dir) => load_sim_dir(dir),
        }
    }
}

pub fn load_plan_file(path: &Path) -> Result<PlanGraph, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
    load_plan(&text).map_err(|source| ConfigError::Plan { path: path.to_path_buf(), source })
}

/// Every `*.spec` file in `dir`, sorted by file name.
pub fn load_sim_dir(dir: &Path) -> Result<Vec<SimulatorSpec>, ConfigError> {
    let read_err = |e: std::io::Error| ConfigError::Read { path: dir.to_path_buf(), message: e.to_string() };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(read_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "spec"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| ConfigError::Read { path: p.clone(), message: e.to_string() })?;
            SimulatorSpec::parse(&text).map_err(|source| ConfigError::Sim { path: p, source })
        })
        .collect()
}
