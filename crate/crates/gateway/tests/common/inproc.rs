//! A hub served in-process with a scripted spawner kind, `fake`, whose
//! servers are whatever the test stands up and reports via the callback.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use gate_core::model::{ExecutionStatus, Scalar};
use gate_core::spawner::{SpawnError, SpawnRequest, Spawner, SpawnerStateMap, ENV_SESSION_TOKEN};
use gateway::hub::default_registry;
use gateway::{Hub, HubConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use super::{eventually, Api, ADMIN, SSO_URL};

/// Session tokens handed to fake servers, by username.
pub type Tokens = Arc<Mutex<HashMap<String, String>>>;

pub struct FakeSpawner {
    tokens: Tokens,
    fail: bool,
    started: bool,
    stopped: bool,
    port: Option<u16>,
}

impl Spawner for FakeSpawner {
    fn kind(&self) -> &str {
        "fake"
    }

    fn start(&mut self, request: &SpawnRequest) -> Result<(), SpawnError> {
        if self.fail {
            return Err(SpawnError::StartFailed("configured to fail".into()));
        }
        let token = request.environment.get(ENV_SESSION_TOKEN).cloned().unwrap_or_default();
        self.tokens.lock().unwrap().insert(request.username.to_string(), token);
        self.started = true;
        Ok(())
    }

    fn stop(&mut self) -> Result<(), SpawnError> {
        if !self.started || self.stopped {
            return Err(SpawnError::NotRunning);
        }
        self.stopped = true;
        Ok(())
    }

    fn poll(&mut self) -> Result<ExecutionStatus, SpawnError> {
        Ok(match (self.started, self.stopped) {
            (true, false) => ExecutionStatus::Running {
                host: Some("127.0.0.1".into()),
                port: self.port,
            },
            (true, true) => ExecutionStatus::Exited { code: Some(0) },
            _ => ExecutionStatus::Unknown,
        })
    }

    fn record_address(&mut self, _host: &str, port: u16) {
        self.port = Some(port);
    }

    fn get_state(&self) -> SpawnerStateMap {
        let mut map = SpawnerStateMap::new();
        map.insert("started".into(), self.started.to_string());
        map.insert("stopped".into(), self.stopped.to_string());
        if let Some(p) = self.port {
            map.insert("port".into(), p.to_string());
        }
        map
    }

    fn load_state(&mut self, state: &SpawnerStateMap) -> Result<(), SpawnError> {
        self.started = state.get("started").is_some_and(|v| v == "true");
        self.stopped = state.get("stopped").is_some_and(|v| v == "true");
        self.port = state.get("port").and_then(|p| p.parse().ok());
        Ok(())
    }
}

/// Hub configuration using only the fake kind.
pub fn fake_config(dir: &Path) -> Value {
    json!({
        "trusted_proxy_addresses": ["127.0.0.1"],
        "sso_url": SSO_URL,
        "admin_users": [ADMIN],
        "profiles": {
            "default_profile_id": "fake",
            "profiles": [
                {"id": "fake", "display_name": "Scripted", "spawner_kind": "fake"},
                {"id": "broken", "display_name": "Fails to start", "spawner_kind": "fake",
                 "config": {"fail": true}},
            ]
        },
        "timeouts": {"startup": 5, "poll_interval": 0.1, "command": 5, "proxy": 1},
        "state_db_path": dir.join("state.json"),
        "spool_dir": dir.join("spool"),
    })
}

pub struct InProc {
    pub dir: TempDir,
    pub hub: Arc<Hub>,
    pub api: Api,
    pub addr: SocketAddr,
    pub tokens: Tokens,
    shutdown: Option<oneshot::Sender<()>>,
}

impl InProc {
    pub async fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = fake_config(dir.path());
        Self::start_with(dir, config).await
    }

    pub async fn start_with(dir: TempDir, mut config: Value) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        config["listen"] = addr.to_string().into();
        let config_path = dir.path().join("hub.json");
        std::fs::write(&config_path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
        let config = HubConfig::load(&config_path).unwrap();
        let tokens = Tokens::default();
        let mut registry = default_registry(&config).unwrap();
        let t = tokens.clone();
        registry.register("fake", move |cfg| {
            Ok(Box::new(FakeSpawner {
                tokens: t.clone(),
                fail: matches!(cfg.get("fail"), Some(Scalar::Bool(true))),
                started: false,
                stopped: false,
                port: None,
            }) as Box<dyn Spawner>)
        });
        let hub = Hub::new(config, Some(config_path), registry).unwrap();
        hub.recover().await;
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(gateway::serve(hub.clone(), listener, async {
            let _ = rx.await;
        }));
        InProc {
            dir,
            hub,
            api: Api::new(format!("http://{addr}"), None),
            addr,
            tokens,
            shutdown: Some(tx),
        }
    }

    /// Stop serving and hand back the state directory.
    pub fn shutdown(mut self) -> TempDir {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let dir = tempfile::tempdir().unwrap();
        std::mem::replace(&mut self.dir, dir)
    }

    pub async fn token(&self, user: &str) -> String {
        eventually("fake server start", Duration::from_secs(5), || {
            self.tokens.lock().unwrap().contains_key(user)
        })
        .await
        .unwrap();
        self.tokens.lock().unwrap()[user].clone()
    }

    /// Spawn the fake profile and report `backend` as the user's server.
    pub async fn attach(&self, user: &str, backend: SocketAddr) -> String {
        let (status, body) = self.api.spawn(user, None).await;
        assert_eq!(status, 202, "{body}");
        let token = self.token(user).await;
        let resp = self.callback(&token, &backend.to_string()).await;
        assert_eq!(resp.0, 200, "{}", resp.1);
        token
    }

    pub async fn callback(&self, token: &str, address: &str) -> (reqwest::StatusCode, Value) {
        let resp = self
            .api
            .client
            .post(self.api.url("/hub/api/callback"))
            .json(&json!({"token": token, "address": address}))
            .send()
            .await
            .unwrap();
        (resp.status(), resp.json().await.unwrap_or(Value::Null))
    }
}

impl Drop for InProc {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
