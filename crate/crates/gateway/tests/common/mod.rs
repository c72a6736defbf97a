#![allow(dead_code)]

pub mod inproc;
pub mod scenarios;

use std::fs::OpenOptions;
use std::net::{IpAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use mocksched::{install_shims, Dialect, MockScheduler, RunnerThread};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tempfile::TempDir;

pub const ADMIN: &str = "admin";
pub const SSO_URL: &str = "https://sso.example.org/login";

pub fn user_server_exe() -> &'static str {
    env!("CARGO_BIN_EXE_user-server")
}

pub fn hub_exe() -> &'static str {
    env!("CARGO_BIN_EXE_hub")
}

pub fn tool_dir() -> PathBuf {
    Path::new(env!("CARGO_BIN_EXE_msub")).parent().unwrap().to_path_buf()
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// A mock scheduler speaking one dialect, with its runner thread and the
/// dialect's tool shims on disk.
pub struct Cluster {
    pub dir: TempDir,
    pub sched: MockScheduler,
    pub dialect: Dialect,
    pub shim_dir: PathBuf,
    runner: Option<RunnerThread>,
}

impl Cluster {
    pub fn new(dialect: Dialect) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let sched = MockScheduler::open(dir.path().join("sched")).unwrap();
        let runner = RunnerThread::spawn(sched.clone(), Duration::from_millis(20)).unwrap();
        let shim_dir = dir.path().join("shims");
        install_shims(dialect, &shim_dir, &tool_dir(), Some(sched.dir())).unwrap();
        Cluster {
            dir,
            sched,
            dialect,
            shim_dir,
            runner: Some(runner),
        }
    }

    /// Hub configuration for this cluster: profile `main` launches the user
    /// server, `silent` a process that never calls back.
    pub fn hub_config(&self, port: u16) -> Value {
        let adapter = self.dialect.name();
        json!({
            "listen": format!("127.0.0.1:{port}"),
            "trusted_proxy_addresses": ["127.0.0.1"],
            "sso_url": SSO_URL,
            "admin_users": [ADMIN],
            "profiles": {
                "default_profile_id": "main",
                "profiles": [
                    {"id": "main", "display_name": "User server", "spawner_kind": "batch",
                     "config": {"adapter": adapter, "cmd": user_server_exe()}},
                    {"id": "silent", "display_name": "Never calls back", "spawner_kind": "batch",
                     "config": {"adapter": adapter, "cmd": "/bin/sleep 60"}},
                ]
            },
            "timeouts": {"startup": 5, "poll_interval": 0.2, "command": 5, "proxy": 10},
            "state_db_path": self.dir.path().join("state.json"),
            "spool_dir": self.dir.path().join("spool"),
            "host_map": {"mocknode*": "127.0.0.1"},
            "scheduler_path": [&self.shim_dir],
        })
    }

    pub fn job_for(&self, user: &str) -> Option<mocksched::MockJob> {
        let reg = self.sched.registry().unwrap();
        reg.jobs
            .values()
            .rev()
            .find(|j| std::fs::read_to_string(&j.script_path).is_ok_and(|s| script_is_for(&s, user)))
            .cloned()
    }

    pub fn jobs_for(&self, user: &str) -> usize {
        let reg = self.sched.registry().unwrap();
        reg.jobs
            .values()
            .filter(|j| std::fs::read_to_string(&j.script_path).is_ok_and(|s| script_is_for(&s, user)))
            .count()
    }

    /// Session token handed to the user's latest job.
    pub fn token_for(&self, user: &str) -> Option<String> {
        let job = self.job_for(user)?;
        let script = std::fs::read_to_string(job.script_path).ok()?;
        let at = script.find("SESSION_TOKEN=")? + "SESSION_TOKEN=".len();
        Some(script[at..].chars().take_while(|c| c.is_ascii_hexdigit()).collect())
    }

    /// Every token ever handed to a job on this cluster.
    pub fn all_tokens(&self) -> Vec<String> {
        let reg = self.sched.registry().unwrap();
        reg.jobs
            .values()
            .filter_map(|j| std::fs::read_to_string(&j.script_path).ok())
            .filter_map(|s| {
                let at = s.find("SESSION_TOKEN=")? + "SESSION_TOKEN=".len();
                Some(s[at..].chars().take_while(|c| c.is_ascii_hexdigit()).collect::<String>())
            })
            .filter(|t| t.len() >= 32)
            .collect()
    }

    /// Concatenated output of every job.
    pub fn job_logs(&self) -> String {
        let mut out = String::new();
        if let Ok(dir) = std::fs::read_dir(self.sched.dir().join("jobs")) {
            for e in dir.flatten() {
                if e.path().extension().is_some_and(|x| x == "log") {
                    out.push_str(&std::fs::read_to_string(e.path()).unwrap_or_default());
                }
            }
        }
        out
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        if let Some(r) = self.runner.take() {
            let _ = r.shutdown();
        }
    }
}

/// Whether a job script launches the server of `user`.
pub fn script_is_for(script: &str, user: &str) -> bool {
    let needle = format!("PATH_PREFIX=/user/{user}");
    script.match_indices(&needle).any(|(i, _)| {
        !script[i + needle.len()..]
            .starts_with(|c: char| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
    })
}

/// The hub binary as a child process, on a fixed port across restarts.
pub struct HubProc {
    pub port: u16,
    pub config_path: PathBuf,
    pub log_path: PathBuf,
    child: Option<Child>,
}

impl HubProc {
    pub fn start(dir: &Path, port: u16, config: &Value) -> Self {
        let config_path = dir.join("hub.json");
        std::fs::write(&config_path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
        let mut hub = HubProc {
            port,
            config_path,
            log_path: dir.join("hub.log"),
            child: None,
        };
        hub.launch();
        hub
    }

    pub fn launch(&mut self) {
        assert!(self.child.is_none(), "hub already running");
        let log = OpenOptions::new().create(true).append(true).open(&self.log_path).unwrap();
        let child = Command::new(hub_exe())
            .arg("--config")
            .arg(&self.config_path)
            .env("RUST_LOG", "debug")
            .stdin(Stdio::null())
            .stdout(log.try_clone().unwrap())
            .stderr(log)
            .spawn()
            .unwrap();
        self.child = Some(child);
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            if let Ok(mut s) = std::net::TcpStream::connect(("127.0.0.1", self.port)) {
                use std::io::{Read, Write};
                let _ = s.write_all(b"GET /hub/api/health HTTP/1.0\r\n\r\n");
                let mut buf = String::new();
                let _ = s.read_to_string(&mut buf);
                if buf.starts_with("HTTP/1.0 200") || buf.starts_with("HTTP/1.1 200") {
                    return;
                }
            }
            if let Some(status) = self.child.as_mut().unwrap().try_wait().unwrap() {
                panic!("hub exited with {status} during startup; log:\n{}", self.log());
            }
            assert!(Instant::now() < deadline, "hub did not come up; log:\n{}", self.log());
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    pub fn kill(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }

    /// SIGTERM and wait for the exit status.
    pub fn terminate(&mut self) -> ExitStatus {
        let mut c = self.child.take().expect("hub running");
        unsafe {
            libc::kill(c.id() as i32, libc::SIGTERM);
        }
        c.wait().unwrap()
    }

    pub fn restart_after_kill(&mut self) {
        self.kill();
        self.launch();
    }

    pub fn log(&self) -> String {
        std::fs::read_to_string(&self.log_path).unwrap_or_default()
    }

    pub fn api(&self) -> Api {
        Api::new(format!("http://127.0.0.1:{}", self.port), None)
    }
}

impl Drop for HubProc {
    fn drop(&mut self) {
        self.kill();
    }
}

/// HTTP client presenting identities as the trusted front proxy would.
#[derive(Clone)]
pub struct Api {
    pub base: String,
    pub client: reqwest::Client,
}

impl Api {
    pub fn new(base: String, local: Option<IpAddr>) -> Self {
        let mut builder = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .pool_max_idle_per_host(0)
            .timeout(Duration::from_secs(30));
        if let Some(ip) = local {
            builder = builder.local_address(ip);
        }
        Api {
            base,
            client: builder.build().unwrap(),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn get(&self, user: &str, path: &str) -> reqwest::Response {
        self.client
            .get(self.url(path))
            .header("X-Remote-User", user)
            .send()
            .await
            .unwrap()
    }

    pub async fn post(&self, user: &str, path: &str, body: Value) -> reqwest::Response {
        self.client
            .post(self.url(path))
            .header("X-Remote-User", user)
            .json(&body)
            .send()
            .await
            .unwrap()
    }

    pub async fn spawn(&self, user: &str, profile: Option<&str>) -> (StatusCode, Value) {
        let body = match profile {
            Some(p) => json!({"profile_id": p}),
            None => json!({}),
        };
        let resp = self.post(user, "/hub/api/spawn", body).await;
        (resp.status(), resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn stop(&self, user: &str) -> (StatusCode, Value) {
        let resp = self.post(user, "/hub/api/stop", json!({})).await;
        (resp.status(), resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn status(&self, user: &str) -> Value {
        self.get(user, "/hub/api/status").await.json().await.unwrap()
    }

    pub async fn introspect(&self, token: &str) -> Value {
        self.client
            .post(self.url("/hub/api/introspect"))
            .json(&json!({"token": token}))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    }

    pub async fn audit(&self) -> Value {
        self.get(ADMIN, "/hub/api/admin/audit").await.json().await.unwrap()
    }

    pub async fn sessions(&self) -> Vec<Value> {
        self.get(ADMIN, "/hub/api/admin/sessions").await.json().await.unwrap()
    }

    pub async fn session_record(&self, user: &str) -> Option<Value> {
        self.sessions().await.into_iter().find(|s| s["username"] == user)
    }

    /// Poll status until `phase`; errors with the last document on timeout.
    pub async fn wait_phase(&self, user: &str, phase: &str, timeout: Duration) -> Result<Value, String> {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.status(user).await;
            if s["phase"] == phase {
                return Ok(s);
            }
            if Instant::now() > deadline {
                return Err(format!("{user} not {phase} after {timeout:?}: {s}"));
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }

    /// GET through the proxy as `user`.
    pub async fn ping(&self, user: &str) -> (StatusCode, String) {
        let resp = self.get(user, &format!("/user/{user}/ping")).await;
        let status = resp.status();
        (status, resp.text().await.unwrap_or_default())
    }
}

/// Wait until `f` holds, polling every 50 ms.
pub async fn eventually(what: &str, timeout: Duration, mut f: impl FnMut() -> bool) -> Result<(), String> {
    let deadline = Instant::now() + timeout;
    while !f() {
        if Instant::now() > deadline {
            return Err(format!("timed out waiting for {what}"));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    Ok(())
}

pub fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Audit must report no discrepancies and strictly increasing epochs.
pub fn audit_clean(audit: &Value) -> Result<(), String> {
    let d = audit["discrepancies"].as_array().ok_or("audit has no discrepancies list")?;
    check(d.is_empty(), || format!("audit discrepancies: {d:?}"))?;
    let epochs: Vec<u64> = audit["epoch_log"]
        .as_array()
        .ok_or("audit has no epoch log")?
        .iter()
        .map(|e| e["epoch"].as_u64().unwrap())
        .collect();
    check(epochs.windows(2).all(|w| w[0] < w[1]), || format!("epochs not strictly increasing: {epochs:?}"))
}
