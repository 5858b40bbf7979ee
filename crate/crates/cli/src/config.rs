use std::path::{Path, PathBuf};

use colosla_core::stream::{Contract, RiskThresholds, StreamConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Service configuration: one TOML file, then `COLOSLA_*` environment overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind: String,
    /// Static bearer token; no auth when unset.
    pub api_token: Option<String>,
    pub pii_config: Option<PathBuf>,
    /// Rules loaded into an empty store at startup (JSON lines).
    pub seed_rules: Option<PathBuf>,
    pub contracts: Vec<Contract>,
    pub risk: RiskThresholds,
    pub stream: StreamConfig,
    /// Jobs running at once.
    pub job_workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("colosla-data"),
            bind: "127.0.0.1:8080".into(),
            api_token: None,
            pii_config: None,
            seed_rules: None,
            contracts: Vec::new(),
            risk: RiskThresholds::default(),
            stream: StreamConfig::default(),
            job_workers: 1,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        if cfg.job_workers == 0 {
            return Err(CliError::Config("job_workers must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("COLOSLA_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("COLOSLA_BIND") {
            self.bind = v;
        }
        if let Some(v) = get("COLOSLA_API_TOKEN") {
            self.api_token = Some(v).filter(|s| !s.is_empty());
        }
    }
}
