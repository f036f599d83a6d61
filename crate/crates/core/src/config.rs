//! Runtime configuration: a TOML file overlaid with `DEBIAS_*` variables.

use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::CoverageThreshold;
use crate::session::SessionSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("invalid value for {key}: `{value}`")]
    Env { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: IpAddr,
    pub port: u16,
    /// Bearer token required on API requests when set.
    pub token: Option<String>,
    /// Directory of static UI assets served outside `/api`.
    pub static_dir: Option<PathBuf>,
    /// Lets API clients run `external` generation backends.
    pub allow_external_backend: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::from([127, 0, 0, 1]),
            port: 8080,
            token: None,
            static_dir: None,
            allow_external_backend: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data_dir: PathBuf,
    pub server: ServerConfig,
    #[serde(flatten)]
    pub session: SessionSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("debias-data"),
            server: ServerConfig::default(),
            session: SessionSettings::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Env {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads `path` when given, else defaults; then applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    /// Applies `DEBIAS_*` overrides read through `lookup`.
    pub fn apply_env(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        let get = |k: &str| lookup(k).filter(|v| !v.is_empty());
        if let Some(v) = get("DEBIAS_PORT") {
            self.server.port = parse("DEBIAS_PORT", &v)?;
        }
        if let Some(v) = get("DEBIAS_BIND") {
            self.server.bind = parse("DEBIAS_BIND", &v)?;
        }
        if let Some(v) = get("DEBIAS_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get("DEBIAS_TOKEN") {
            self.server.token = Some(v);
        }
        if let Some(v) = get("DEBIAS_STATIC_DIR") {
            self.server.static_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = get("DEBIAS_CAP") {
            self.session.augment.cap = parse("DEBIAS_CAP", &v)?;
        }
        if let Some(v) = get("DEBIAS_COVERAGE_THRESHOLD") {
            self.session.bias.coverage = CoverageThreshold::parse(&v).ok_or(ConfigError::Env {
                key: "DEBIAS_COVERAGE_THRESHOLD".into(),
                value: v.clone(),
            })?;
        }
        if let Some(v) = get("DEBIAS_WARNING_THRESHOLD") {
            self.session.augment.warning_threshold = parse("DEBIAS_WARNING_THRESHOLD", &v)?;
        }
        if let Some(v) = get("DEBIAS_DRIFT_THRESHOLD") {
            self.session.drift_threshold = parse("DEBIAS_DRIFT_THRESHOLD", &v)?;
        }
        Ok(())
    }
}
