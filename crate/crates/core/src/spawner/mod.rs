//! The pluggable spawner contract and the registry that instantiates
//! spawners by kind.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::batch::BatchError;
use crate::model::{ConfigMap, ExecutionStatus, Username};

mod local;

pub use local::{register_local, LocalSpawner, LocalSpawnerConfig, LOCAL_KIND};

/// Environment keys every spawned user server receives.
pub const ENV_GATEWAY_URL: &str = "GATEWAY_URL";
pub const ENV_SESSION_TOKEN: &str = "SESSION_TOKEN";
pub const ENV_PATH_PREFIX: &str = "PATH_PREFIX";
pub const ENV_PORT: &str = "PORT";
/// Host name a server should report in its callback, when the spawner knows it.
pub const ENV_ADVERTISE_HOST: &str = "ADVERTISE_HOST";

/// Opaque key-value state a spawner persists through hub restarts.
pub type SpawnerStateMap = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum SpawnError {
    #[error("start failed: {0}")]
    StartFailed(String),
    #[error("a server is already running for this spawner")]
    AlreadyRunning,
    #[error("no server is running for this spawner")]
    NotRunning,
    #[error("malformed spawner state: {0}")]
    MalformedState(String),
    #[error("status query failed: {0}")]
    QueryFailed(String),
    #[error("unknown spawner kind {0:?}")]
    UnknownKind(String),
    #[error("invalid spawner configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Batch(#[from] BatchError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpawnRequest {
    pub username: Username,
    pub environment: BTreeMap<String, String>,
    pub resource_hints: ConfigMap,
}

impl SpawnRequest {
    pub fn new(username: Username, gateway_url: &str, token: &str, path_prefix: &str) -> Self {
        let environment = BTreeMap::from([
            (ENV_GATEWAY_URL.to_string(), gateway_url.to_string()),
            (ENV_SESSION_TOKEN.to_string(), token.to_string()),
            (ENV_PATH_PREFIX.to_string(), path_prefix.to_string()),
        ]);
        SpawnRequest {
            username,
            environment,
            resource_hints: ConfigMap::new(),
        }
    }

    pub fn env(&self, key: &str) -> Option<&str> {
        self.environment.get(key).map(String::as_str)
    }

    pub(crate) fn required_env(&self, key: &str) -> Result<&str, SpawnError> {
        self.env(key)
            .ok_or_else(|| SpawnError::StartFailed(format!("spawn request lacks {key}")))
    }
}

/// Kind plus configuration: everything needed to build a spawner.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpawnerDescriptor {
    pub kind: String,
    #[serde(default)]
    pub config: ConfigMap,
}

/// One per-user backend manager.
///
/// Instances are owned by a single supervisor; mutating calls are never
/// issued concurrently. All methods may block for at most one external
/// command execution.
pub trait Spawner: Send {
    fn kind(&self) -> &str;

    /// Launch the backend. Returns once the launch is recorded; the server
    /// itself comes up asynchronously and is observed through `poll`.
    fn start(&mut self, request: &SpawnRequest) -> Result<(), SpawnError>;

    /// Request termination. A second call after a completed stop returns
    /// `NotRunning`.
    fn stop(&mut self) -> Result<(), SpawnError>;

    /// Idempotent status probe. `Err(QueryFailed)` reports a transient
    /// inability to learn the status, not a status.
    fn poll(&mut self) -> Result<ExecutionStatus, SpawnError>;

    /// Record the address the server reported through its callback.
    fn record_address(&mut self, host: &str, port: u16);

    fn get_state(&self) -> SpawnerStateMap;

    fn load_state(&mut self, state: &SpawnerStateMap) -> Result<(), SpawnError>;
}

type Builder = dyn Fn(&ConfigMap) -> Result<Box<dyn Spawner>, SpawnError> + Send + Sync;

/// Named spawner constructors, fixed at hub startup.
#[derive(Clone, Default)]
pub struct SpawnerRegistry {
    builders: HashMap<String, Arc<Builder>>,
}

impl SpawnerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, kind: impl Into<String>, builder: F)
    where
        F: Fn(&ConfigMap) -> Result<Box<dyn Spawner>, SpawnError> + Send + Sync + 'static,
    {
        self.builders.insert(kind.into(), Arc::new(builder));
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.builders.contains_key(kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, descriptor: &SpawnerDescriptor) -> Result<Box<dyn Spawner>, SpawnError> {
        let builder = self
            .builders
            .get(&descriptor.kind)
            .ok_or_else(|| SpawnError::UnknownKind(descriptor.kind.clone()))?;
        builder(&descriptor.config)
    }
}

impl std::fmt::Debug for SpawnerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut kinds: Vec<_> = self.builders.keys().collect();
        kinds.sort();
        f.debug_struct("SpawnerRegistry").field("kinds", &kinds).finish()
    }
}

pub(crate) fn parse_state_field<T: std::str::FromStr>(
    state: &SpawnerStateMap,
    key: &str,
) -> Result<Option<T>, SpawnError> {
    match state.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| SpawnError::MalformedState(format!("bad value for {key:?}: {raw:?}"))),
    }
}
