//! Hub configuration file.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use gate_core::batch::{builtin_adapters, AdapterSpec, SchedulerAdapter};
use gate_core::profiles::ProfileCatalog;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timeouts {
    /// Seconds from spawn request to callback before the session fails.
    #[serde(default = "default_startup")]
    pub startup: f64,
    /// Seconds between status polls of a pending or running session.
    #[serde(default = "default_poll_interval")]
    pub poll_interval: f64,
    /// Upper bound on a single scheduler command.
    #[serde(default = "default_command")]
    pub command: f64,
    /// Seconds the proxy waits for a backend's response headers.
    #[serde(default = "default_proxy")]
    pub proxy: f64,
}

fn default_startup() -> f64 {
    300.0
}

fn default_poll_interval() -> f64 {
    30.0
}

fn default_command() -> f64 {
    10.0
}

fn default_proxy() -> f64 {
    60.0
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            startup: default_startup(),
            poll_interval: default_poll_interval(),
            command: default_command(),
            proxy: default_proxy(),
        }
    }
}

impl Timeouts {
    pub fn startup(&self) -> Duration {
        Duration::from_secs_f64(self.startup)
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_secs_f64(self.poll_interval)
    }

    pub fn command(&self) -> Duration {
        Duration::from_secs_f64(self.command)
    }

    pub fn proxy(&self) -> Duration {
        Duration::from_secs_f64(self.proxy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HubConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Base URL user servers use to reach the hub. Defaults to
    /// `http://{listen}`.
    #[serde(default)]
    pub public_url: Option<String>,
    /// Peers allowed to assert identity through the auth header.
    #[serde(default = "default_trusted")]
    pub trusted_proxy_addresses: Vec<IpAddr>,
    #[serde(default = "default_auth_header")]
    pub auth_header_name: String,
    /// Where unauthenticated browsers are sent.
    #[serde(default = "default_sso_url")]
    pub sso_url: String,
    #[serde(default)]
    pub admin_users: Vec<String>,
    pub profiles: ProfileCatalog,
    /// Adapters added to (or replacing same-named) builtin ones.
    #[serde(default)]
    pub adapters: Vec<AdapterSpec>,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default = "default_state_db")]
    pub state_db_path: PathBuf,
    /// Directory receiving a copy of every submitted job script.
    #[serde(default)]
    pub spool_dir: Option<PathBuf>,
    /// Glob pattern to address: rewrites hosts reported by callbacks.
    #[serde(default)]
    pub host_map: BTreeMap<String, String>,
    /// Directories searched first for scheduler tools.
    #[serde(default)]
    pub scheduler_path: Vec<PathBuf>,
    /// Extra environment for scheduler tool invocations.
    #[serde(default)]
    pub scheduler_env: BTreeMap<String, String>,
    /// Session token lifetime in seconds.
    #[serde(default = "default_token_ttl")]
    pub token_ttl: f64,
}

fn default_listen() -> SocketAddr {
    SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), 8000)
}

fn default_trusted() -> Vec<IpAddr> {
    vec![IpAddr::V4(Ipv4Addr::LOCALHOST)]
}

fn default_auth_header() -> String {
    "X-Remote-User".to_string()
}

fn default_sso_url() -> String {
    "/sso/login".to_string()
}

fn default_state_db() -> PathBuf {
    PathBuf::from("gateway-state.json")
}

fn default_token_ttl() -> f64 {
    86400.0
}

impl HubConfig {
    /// A configuration with defaults everywhere except the catalog.
    pub fn with_profiles(profiles: ProfileCatalog) -> Self {
        serde_json::from_value(serde_json::json!({ "profiles": profiles })).expect("defaults are valid")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: HubConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trusted_proxy_addresses.is_empty() {
            return Err(ConfigError::Invalid("trusted_proxy_addresses is empty".into()));
        }
        if axum::http::HeaderName::from_bytes(self.auth_header_name.as_bytes()).is_err() {
            return Err(ConfigError::Invalid(format!("bad auth_header_name {:?}", self.auth_header_name)));
        }
        if self.sso_url.is_empty() {
            return Err(ConfigError::Invalid("sso_url is empty".into()));
        }
        for user in &self.admin_users {
            gate_core::normalize_username(user).map_err(|e| ConfigError::Invalid(format!("admin_users: {e}")))?;
        }
        let t = &self.timeouts;
        for (name, v) in [("startup", t.startup), ("poll_interval", t.poll_interval), ("command", t.command), ("proxy", t.proxy)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("timeouts.{name} must be positive")));
            }
        }
        if !(self.token_ttl.is_finite() && self.token_ttl > 0.0) {
            return Err(ConfigError::Invalid("token_ttl must be positive".into()));
        }
        self.scheduler_adapters()?;
        HostMap::new(&self.host_map)?;
        Ok(())
    }

    pub fn public_url(&self) -> String {
        match &self.public_url {
            Some(url) => url.trim_end_matches('/').to_string(),
            None => format!("http://{}", self.listen),
        }
    }

    /// Builtin adapters with configured ones layered on top.
    pub fn scheduler_adapters(&self) -> Result<Vec<SchedulerAdapter>, ConfigError> {
        let mut adapters = builtin_adapters();
        for spec in &self.adapters {
            let adapter = SchedulerAdapter::new(spec.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            adapters.retain(|a| a.name() != adapter.name());
            adapters.push(adapter);
        }
        Ok(adapters)
    }

    pub fn is_admin(&self, username: &str) -> bool {
        self.admin_users.iter().any(|u| u.eq_ignore_ascii_case(username))
    }
}

/// Host rewriting for callback addresses, e.g. `mocknode*` to `127.0.0.1`.
#[derive(Debug, Clone, Default)]
pub struct HostMap {
    rules: Vec<(Regex, String)>,
}

impl HostMap {
    pub fn new(map: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let rules = map
            .iter()
            .map(|(glob, to)| {
                let pattern = format!("^{}$", regex::escape(glob).replace(r"\*", ".*").replace(r"\?", "."));
                Regex::new(&pattern)
                    .map(|re| (re, to.clone()))
                    .map_err(|e| ConfigError::Invalid(format!("host_map {glob:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(HostMap { rules })
    }

    pub fn resolve<'a>(&'a self, host: &'a str) -> &'a str {
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(host))
            .map(|(_, to)| to.as_str())
            .unwrap_or(host)
    }
}
