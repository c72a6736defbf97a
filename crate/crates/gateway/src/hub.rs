//! The hub: user and session registry, route table, token store and one
//! supervisor task per active session.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::Utc;
use gate_core::batch::{register_batch, ProcessRunner, TemplateVars};
use gate_core::profiles::{apply_selection, OptionsSelection, ProfileCatalog, ProfilesSpawner};
use gate_core::routes::{RouteEntry, RouteTable, Routes};
use gate_core::spawner::{register_local, SpawnError, SpawnRequest, Spawner, SpawnerRegistry};
use gate_core::{
    ExecutionStatus, LifecycleEvent, LifecyclePhase, SessionRecord, UserRecord, Username,
};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::time::{Instant, MissedTickBehavior};
use tracing::{error, info, warn};

use crate::config::{ConfigError, HostMap, HubConfig};
use crate::state::{HubState, StateDb, StateError};

/// Consecutive failed status queries tolerated before a session fails.
pub const MAX_QUERY_FAILURES: u32 = 3;

pub fn user_prefix(user: &Username) -> String {
    format!("/user/{user}")
}

#[derive(Debug, Error)]
pub enum HubError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("profile catalog: {0}")]
    Catalog(String),
}

/// Failures surfaced through the HTTP API.
#[derive(Debug, Clone, Error)]
pub enum ApiError {
    #[error("user already has an active session")]
    SessionExists(Box<SessionRecord>),
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("no active session")]
    NoSession,
    #[error("invalid or expired token")]
    InvalidToken,
    #[error("session is {0}, not waiting for a callback")]
    WrongPhase(LifecyclePhase),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("cannot start session: {0}")]
    StartFailed(String),
    #[error("{0}")]
    Unavailable(String),
}

/// One route table mutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EpochEvent {
    pub epoch: u64,
    pub op: &'static str,
    pub prefix: String,
    pub target: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Audit {
    pub discrepancies: Vec<String>,
    pub route_epoch: u64,
    pub epoch_log: Vec<EpochEvent>,
}

struct Inner {
    state: HubState,
    epoch_log: Vec<EpochEvent>,
}

/// Mutable view handed to [`Hub::mutate`] closures. Route and token changes
/// made here are persisted together with the session records.
pub struct Txn<'a> {
    pub state: &'a mut HubState,
    routes: &'a Routes,
    log: &'a mut Vec<EpochEvent>,
}

impl Txn<'_> {
    pub fn session(&mut self, user: &Username) -> Option<&mut SessionRecord> {
        self.state.sessions.get_mut(user)
    }

    pub fn add_route(&mut self, prefix: &str, target: &str) {
        match self.routes.add_route(prefix, target) {
            Ok(epoch) => self.log.push(EpochEvent {
                epoch,
                op: "add",
                prefix: prefix.to_string(),
                target: Some(target.to_string()),
            }),
            Err(e) => error!("route add failed: {e}"),
        }
    }

    pub fn remove_route(&mut self, prefix: &str) {
        let before = self.routes.snapshot().epoch();
        match self.routes.remove_route(prefix) {
            Ok(epoch) if epoch != before => self.log.push(EpochEvent {
                epoch,
                op: "remove",
                prefix: prefix.to_string(),
                target: None,
            }),
            Ok(_) => {}
            Err(e) => error!("route remove failed: {e}"),
        }
    }

    /// Apply `event` to the user's session. When the session ends, its route
    /// is removed and its token revoked in the same step.
    pub fn apply(&mut self, user: &Username, event: LifecycleEvent, reason: Option<String>) -> Option<SessionRecord> {
        let rec = self.state.sessions.get_mut(user)?;
        let from = rec.phase;
        let result = match reason {
            Some(r) => rec.fail(event, r).map(|_| rec.phase),
            None => rec.apply(event),
        };
        match result {
            Ok(to) => info!(user = %user, "session {from} -> {to} on {event:?}"),
            Err(e) => {
                warn!(user = %user, "ignored: {e}");
                return Some(rec.clone());
            }
        }
        let rec = rec.clone();
        if rec.phase.is_terminal() {
            self.remove_route(&user_prefix(user));
            self.state.revoke_token(&rec.token_id);
        }
        Some(rec)
    }
}

enum Command {
    Callback {
        host: String,
        port: u16,
        reply: oneshot::Sender<Result<SessionRecord, ApiError>>,
    },
    Stop {
        reply: oneshot::Sender<SessionRecord>,
    },
}

enum Mode {
    Start { secret: String },
    Resume { ready: oneshot::Sender<()> },
}

pub struct Hub {
    config: HubConfig,
    config_path: Option<PathBuf>,
    catalog: RwLock<Arc<ProfileCatalog>>,
    registry: Arc<SpawnerRegistry>,
    routes: Routes,
    host_map: HostMap,
    db: StateDb,
    inner: Mutex<Inner>,
    snapshot: RwLock<Arc<HubState>>,
    supervisors: Mutex<HashMap<Username, (u64, mpsc::UnboundedSender<Command>)>>,
    generation: AtomicU64,
}

/// The registry a configuration describes: `local` plus `batch` over the
/// configured adapters, running scheduler tools as child processes.
pub fn default_registry(config: &HubConfig) -> Result<SpawnerRegistry, ConfigError> {
    let mut registry = SpawnerRegistry::new();
    register_local(&mut registry);
    let runner = ProcessRunner::new()
        .search_path(config.scheduler_path.clone())
        .env(config.scheduler_env.clone())
        .timeout(config.timeouts.command());
    register_batch(
        &mut registry,
        config.scheduler_adapters()?,
        Arc::new(runner),
        TemplateVars::new(),
        config.spool_dir.clone(),
    );
    Ok(registry)
}

impl Hub {
    /// Load persisted state and build a hub. Call [`Hub::recover`] before
    /// serving.
    pub fn new(config: HubConfig, config_path: Option<PathBuf>, registry: SpawnerRegistry) -> Result<Arc<Self>, HubError> {
        config.validate()?;
        config
            .profiles
            .check_kinds(&registry)
            .map_err(|e| HubError::Catalog(e.to_string()))?;
        let db = StateDb::new(&config.state_db_path);
        let mut state = db.load()?;
        let purged = state.purge_expired();
        if purged > 0 {
            info!("dropped {purged} expired tokens");
        }
        let host_map = HostMap::new(&config.host_map)?;
        Ok(Arc::new(Hub {
            catalog: RwLock::new(Arc::new(config.profiles.clone())),
            config_path,
            registry: Arc::new(registry),
            routes: Routes::new(),
            host_map,
            db,
            snapshot: RwLock::new(Arc::new(state.clone())),
            inner: Mutex::new(Inner {
                state,
                epoch_log: Vec::new(),
            }),
            supervisors: Mutex::new(HashMap::new()),
            generation: AtomicU64::new(0),
            config,
        }))
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn catalog(&self) -> Arc<ProfileCatalog> {
        self.catalog.read().expect("catalog lock").clone()
    }

    pub fn routes(&self) -> Arc<RouteTable> {
        self.routes.snapshot()
    }

    pub fn lookup_route(&self, path: &str) -> Option<RouteEntry> {
        self.routes.lookup_target(path)
    }

    /// Last committed state.
    pub fn state(&self) -> Arc<HubState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn session(&self, user: &Username) -> Option<SessionRecord> {
        self.state().sessions.get(user).cloned()
    }

    pub fn introspect(&self, secret: &str) -> Option<Username> {
        self.state().introspect(secret).cloned()
    }

    /// Secret of the token held by the user's active session.
    pub fn session_secret(&self, user: &Username) -> Option<String> {
        let state = self.state();
        let rec = state.sessions.get(user)?;
        state.tokens.get(&rec.token_id).map(|t| t.secret.clone())
    }

    /// Run `f` under the registry lock, then persist and publish.
    pub fn mutate<T>(&self, f: impl FnOnce(&mut Txn) -> T) -> T {
        let mut inner = self.inner.lock().expect("hub lock");
        let Inner { state, epoch_log } = &mut *inner;
        let mut txn = Txn {
            state,
            routes: &self.routes,
            log: epoch_log,
        };
        let out = f(&mut txn);
        if let Err(e) = self.db.save(&inner.state) {
            error!("persisting state failed: {e}");
        }
        *self.snapshot.write().expect("snapshot lock") = Arc::new(inner.state.clone());
        out
    }

    /// Record a user on first authentication.
    pub fn ensure_user(&self, user: &Username) {
        if self.state().users.contains_key(user) {
            return;
        }
        let admin = self.config.is_admin(user.as_str());
        self.mutate(|t| {
            t.state.users.entry(user.clone()).or_insert_with(|| UserRecord {
                username: user.clone(),
                created_at: Utc::now(),
                admin,
            });
        });
    }

    pub fn is_admin(&self, user: &Username) -> bool {
        self.config.is_admin(user.as_str())
    }

    pub fn reload_profiles(&self) -> Result<usize, ApiError> {
        let path = self
            .config_path
            .as_ref()
            .ok_or_else(|| ApiError::Unavailable("hub was started without a config file".into()))?;
        let config = HubConfig::load(path).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        config
            .profiles
            .check_kinds(&self.registry)
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let n = config.profiles.profiles().len();
        *self.catalog.write().expect("catalog lock") = Arc::new(config.profiles);
        info!("reloaded {n} profiles");
        Ok(n)
    }

    fn register_supervisor(&self, user: &Username) -> (u64, mpsc::UnboundedReceiver<Command>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let id = self.generation.fetch_add(1, Ordering::Relaxed);
        self.supervisors.lock().expect("supervisor lock").insert(user.clone(), (id, tx));
        (id, rx)
    }

    fn unregister_supervisor(&self, user: &Username, id: u64) {
        let mut map = self.supervisors.lock().expect("supervisor lock");
        if map.get(user).is_some_and(|(g, _)| *g == id) {
            map.remove(user);
        }
    }

    fn send(&self, user: &Username, cmd: Command) -> Result<(), ApiError> {
        let map = self.supervisors.lock().expect("supervisor lock");
        let (_, tx) = map
            .get(user)
            .ok_or_else(|| ApiError::Unavailable(format!("no supervisor for {user}")))?;
        tx.send(cmd)
            .map_err(|_| ApiError::Unavailable(format!("supervisor for {user} has exited")))
    }

    /// Start a session for `user` with the selected profile.
    pub fn spawn(self: &Arc<Self>, user: &Username, selection: &OptionsSelection) -> Result<SessionRecord, ApiError> {
        let catalog = self.catalog();
        let (profile, descriptor) =
            apply_selection(&catalog, selection).map_err(|e| ApiError::UnknownProfile(e.0))?;
        let kind = descriptor.kind.clone();
        let spawner = ProfilesSpawner::with_descriptor(self.registry.clone(), descriptor)
            .map_err(|e| ApiError::StartFailed(e.to_string()))?;
        let ttl = chrono::Duration::milliseconds((self.config.token_ttl * 1000.0) as i64);
        let created = self.mutate(|t| {
            if let Some(existing) = t.state.sessions.get(user) {
                if !existing.phase.is_terminal() {
                    return Err(ApiError::SessionExists(Box::new(existing.clone())));
                }
                let stale = existing.token_id.clone();
                t.state.revoke_token(&stale);
            }
            let (secret, hash) = t.state.issue_token(user, ttl);
            let mut rec = SessionRecord::new(user.clone(), kind, hash);
            rec.profile_id = Some(profile.id.clone());
            rec.apply(LifecycleEvent::SpawnRequested).expect("Idle accepts SpawnRequested");
            t.state.sessions.insert(user.clone(), rec.clone());
            let (id, rx) = self.register_supervisor(user);
            Ok((rec, secret, id, rx))
        });
        let (rec, secret, id, rx) = created?;
        info!(user = %user, profile = %profile.id, token = %crate::state::fingerprint(&secret), "spawn requested");
        let sup = Supervisor::new(self.clone(), user.clone(), Some(spawner), rx, id);
        tokio::spawn(sup.run(Mode::Start { secret }));
        Ok(rec)
    }

    /// Stop the user's session; resolves with the final record.
    pub async fn stop(&self, user: &Username) -> Result<SessionRecord, ApiError> {
        match self.session(user) {
            Some(rec) if !rec.phase.is_terminal() => {}
            _ => return Err(ApiError::NoSession),
        }
        let (reply, rx) = oneshot::channel();
        self.send(user, Command::Stop { reply })?;
        match rx.await {
            Ok(rec) => Ok(rec),
            Err(_) => self.session(user).ok_or(ApiError::NoSession),
        }
    }

    /// A user server reports its address.
    pub async fn callback(&self, secret: &str, address: &str) -> Result<SessionRecord, ApiError> {
        let user = self.introspect(secret).ok_or(ApiError::InvalidToken)?;
        let rec = self.session(&user).ok_or(ApiError::InvalidToken)?;
        if rec.token_id != crate::state::token_hash(secret) {
            return Err(ApiError::InvalidToken);
        }
        let (host, port) = parse_address(address)?;
        let (reply, rx) = oneshot::channel();
        self.send(&user, Command::Callback { host, port, reply })?;
        rx.await
            .unwrap_or_else(|_| Err(ApiError::Unavailable("supervisor exited".into())))
    }

    /// Rebuild routes and supervisors from persisted sessions. Returns once
    /// each session has been polled once.
    pub async fn recover(self: &Arc<Self>) {
        let sessions: Vec<SessionRecord> = self
            .state()
            .sessions
            .values()
            .filter(|r| !r.phase.is_terminal())
            .cloned()
            .collect();
        let mut waits = Vec::new();
        for rec in sessions {
            let user = rec.username.clone();
            if matches!(rec.phase, LifecyclePhase::Idle | LifecyclePhase::Submitting) {
                self.mutate(|t| {
                    t.apply(&user, LifecycleEvent::Error, Some("hub restarted before the job was submitted".into()))
                });
                continue;
            }
            let mut spawner = ProfilesSpawner::new(self.registry.clone());
            if let Err(e) = spawner.load_state(&rec.spawner_state) {
                self.mutate(|t| t.apply(&user, LifecycleEvent::Error, Some(format!("cannot restore spawner: {e}"))));
                continue;
            }
            if rec.phase == LifecyclePhase::Running {
                match rec.address.as_deref().and_then(target_of) {
                    Some(target) => self.mutate(|t| t.add_route(&user_prefix(&user), &target)),
                    None => {
                        self.mutate(|t| t.apply(&user, LifecycleEvent::Error, Some("running session has no address".into())));
                        continue;
                    }
                }
            }
            let (id, rx) = self.register_supervisor(&user);
            let (ready, wait) = oneshot::channel();
            let sup = Supervisor::new(self.clone(), user, Some(spawner), rx, id);
            tokio::spawn(sup.run(Mode::Resume { ready }));
            waits.push(wait);
        }
        let n = waits.len();
        for w in waits {
            let _ = w.await;
        }
        info!("recovered {n} sessions");
    }

    /// Cross-check sessions, routes and tokens.
    pub fn audit(&self) -> Audit {
        let inner = self.inner.lock().expect("hub lock");
        let state = &inner.state;
        let table = self.routes.snapshot();
        let mut out = Vec::new();
        for entry in table.entries() {
            let owner = entry
                .path_prefix
                .strip_prefix("/user/")
                .and_then(|u| u.parse::<Username>().ok());
            let rec = owner.as_ref().and_then(|u| state.sessions.get(u));
            match rec {
                Some(rec) if rec.phase == LifecyclePhase::Running => {
                    if rec.address.as_deref().and_then(target_of).as_deref() != Some(entry.target.as_str()) {
                        out.push(format!("route {} targets {} but session address is {:?}", entry.path_prefix, entry.target, rec.address));
                    }
                }
                _ => out.push(format!("route {} has no running session", entry.path_prefix)),
            }
        }
        for (user, rec) in &state.sessions {
            let routed = table.get(&user_prefix(user)).is_some();
            if rec.phase == LifecyclePhase::Running && !routed {
                out.push(format!("running session {user} has no route"));
            }
            if (rec.phase == LifecyclePhase::Running) != rec.address.is_some() {
                out.push(format!("session {user} in {} has address {:?}", rec.phase, rec.address));
            }
            let live = state.tokens.contains_key(&rec.token_id);
            if rec.phase.is_terminal() && live {
                out.push(format!("ended session {user} still holds a token"));
            }
            if !rec.phase.is_terminal() && !live {
                out.push(format!("active session {user} has no token"));
            }
        }
        for (hash, tok) in &state.tokens {
            let owned = state
                .sessions
                .get(&tok.username)
                .is_some_and(|r| &r.token_id == hash && !r.phase.is_terminal());
            if !owned {
                out.push(format!("token {} of {} belongs to no active session", &hash[..8], tok.username));
            }
        }
        if inner.epoch_log.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            out.push("route epochs are not strictly increasing".to_string());
        }
        Audit {
            discrepancies: out,
            route_epoch: table.epoch(),
            epoch_log: inner.epoch_log.clone(),
        }
    }

    pub fn resolve_host<'a>(&'a self, host: &'a str) -> &'a str {
        self.host_map.resolve(host)
    }
}

/// `host:port` from a callback body.
pub fn parse_address(address: &str) -> Result<(String, u16), ApiError> {
    let bad = || ApiError::BadRequest(format!("address must be host:port, got {address:?}"));
    let (host, port) = address.rsplit_once(':').ok_or_else(bad)?;
    let port: u16 = port.parse().map_err(|_| bad())?;
    let host_ok = !host.is_empty()
        && host.len() <= 253
        && host.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-');
    if !host_ok || port == 0 {
        return Err(bad());
    }
    Ok((host.to_string(), port))
}

/// `host:port` of a session address URL.
pub fn target_of(address: &str) -> Option<String> {
    let rest = address.strip_prefix("http://")?;
    let target = rest.split('/').next()?;
    (!target.is_empty()).then(|| target.to_string())
}

/// Owns one session's spawner and serializes every operation on it.
struct Supervisor {
    hub: Arc<Hub>,
    user: Username,
    prefix: String,
    spawner: Option<ProfilesSpawner>,
    rx: mpsc::UnboundedReceiver<Command>,
    id: u64,
    failures: u32,
}

impl Supervisor {
    fn new(
        hub: Arc<Hub>,
        user: Username,
        spawner: Option<ProfilesSpawner>,
        rx: mpsc::UnboundedReceiver<Command>,
        id: u64,
    ) -> Self {
        let prefix = user_prefix(&user);
        Supervisor {
            hub,
            user,
            prefix,
            spawner,
            rx,
            id,
            failures: 0,
        }
    }

    /// Run a blocking spawner call off the async runtime.
    async fn call<T: Send + 'static>(&mut self, f: impl FnOnce(&mut ProfilesSpawner) -> T + Send + 'static) -> T {
        let mut spawner = self.spawner.take().expect("spawner present between calls");
        let (spawner, out) = tokio::task::spawn_blocking(move || {
            let out = f(&mut spawner);
            (spawner, out)
        })
        .await
        .expect("spawner call panicked");
        self.spawner = Some(spawner);
        out
    }

    fn spawner_state(&self) -> std::collections::BTreeMap<String, String> {
        self.spawner.as_ref().map(|s| s.get_state()).unwrap_or_default()
    }

    fn save_spawner_state(&self, t: &mut Txn) {
        let state = self.spawner_state();
        if let Some(rec) = t.session(&self.user) {
            rec.spawner_state = state;
        }
    }

    fn phase(&self) -> Option<LifecyclePhase> {
        self.hub.session(&self.user).map(|r| r.phase)
    }

    async fn run(mut self, mode: Mode) {
        let mut ready = None;
        match mode {
            Mode::Start { secret } => {
                let req = SpawnRequest::new(self.user.clone(), &self.hub.config.public_url(), &secret, &self.prefix);
                drop(secret);
                match self.call(move |s| s.start(&req)).await {
                    Ok(()) => {
                        self.hub.mutate(|t| {
                            self.save_spawner_state(t);
                            t.apply(&self.user, LifecycleEvent::Submitted, None)
                        });
                    }
                    Err(e) => {
                        self.hub
                            .mutate(|t| t.apply(&self.user, LifecycleEvent::Error, Some(format!("start failed: {e}"))));
                    }
                }
            }
            Mode::Resume { ready: r } => {
                if self.phase() == Some(LifecyclePhase::Stopping) {
                    self.finish_stop().await;
                    let _ = r.send(());
                } else {
                    ready = Some(r);
                }
            }
        }
        self.supervise(ready).await;
        self.hub.unregister_supervisor(&self.user, self.id);
        // Answer anything that raced with the session ending.
        self.rx.close();
        while let Ok(cmd) = self.rx.try_recv() {
            let rec = self.hub.session(&self.user);
            match cmd {
                Command::Stop { reply } => {
                    if let Some(rec) = rec {
                        let _ = reply.send(rec);
                    }
                }
                Command::Callback { reply, .. } => {
                    let phase = rec.map(|r| r.phase).unwrap_or(LifecyclePhase::Idle);
                    let _ = reply.send(Err(ApiError::WrongPhase(phase)));
                }
            }
        }
    }

    async fn supervise(&mut self, mut ready: Option<oneshot::Sender<()>>) {
        let period = self.hub.config.timeouts.poll_interval();
        let first = if ready.is_some() { Instant::now() } else { Instant::now() + period };
        let mut ticker = tokio::time::interval_at(first, period);
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            let Some(rec) = self.hub.session(&self.user) else { break };
            if rec.phase.is_terminal() {
                break;
            }
            let deadline = match (rec.phase, rec.requested_at) {
                (LifecyclePhase::Pending | LifecyclePhase::Starting, Some(at)) => {
                    let due = at + chrono::Duration::from_std(self.hub.config.timeouts.startup()).unwrap_or_default();
                    let left = (due - Utc::now()).to_std().unwrap_or(Duration::ZERO);
                    Some(Instant::now() + left)
                }
                _ => None,
            };
            let done = tokio::select! {
                biased;
                cmd = self.rx.recv() => match cmd {
                    Some(cmd) => self.command(cmd).await,
                    None => true,
                },
                _ = tokio::time::sleep_until(deadline.unwrap_or_else(Instant::now)), if deadline.is_some() => {
                    self.timeout().await;
                    true
                }
                _ = ticker.tick() => {
                    let done = self.poll().await;
                    if let Some(r) = ready.take() {
                        let _ = r.send(());
                    }
                    done
                }
            };
            if done {
                break;
            }
        }
        if let Some(r) = ready.take() {
            let _ = r.send(());
        }
    }

    /// Returns true once the session has ended.
    async fn command(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Stop { reply } => {
                let rec = self.stop().await;
                let _ = reply.send(rec);
                true
            }
            Command::Callback { host, port, reply } => {
                let result = self.callback(&host, port);
                let _ = reply.send(result);
                false
            }
        }
    }

    fn callback(&mut self, host: &str, port: u16) -> Result<SessionRecord, ApiError> {
        let phase = self.phase().unwrap_or(LifecyclePhase::Idle);
        if !matches!(phase, LifecyclePhase::Pending | LifecyclePhase::Starting) {
            return Err(ApiError::WrongPhase(phase));
        }
        let target = format!("{}:{port}", self.hub.resolve_host(host));
        if let Some(s) = self.spawner.as_mut() {
            s.record_address(host, port);
        }
        let rec = self.hub.mutate(|t| {
            self.save_spawner_state(t);
            if phase == LifecyclePhase::Pending {
                t.apply(&self.user, LifecycleEvent::SchedulerRunning, None);
            }
            t.add_route(&self.prefix, &target);
            t.apply(&self.user, LifecycleEvent::CallbackReceived, None);
            let rec = t.session(&self.user).expect("session exists");
            rec.address = Some(format!("http://{target}{}", self.prefix));
            rec.clone()
        });
        info!(user = %self.user, "server up at {target}");
        Ok(rec)
    }

    async fn poll(&mut self) -> bool {
        let result = self.call(|s| s.poll()).await;
        let status = match result {
            Ok(status) => {
                self.failures = 0;
                status
            }
            Err(SpawnError::QueryFailed(msg)) => {
                self.failures += 1;
                warn!(user = %self.user, "status query failed ({}/{MAX_QUERY_FAILURES}): {msg}", self.failures);
                if self.failures < MAX_QUERY_FAILURES {
                    return false;
                }
                let reason = format!("scheduler unreachable after {MAX_QUERY_FAILURES} attempts: {msg}");
                self.hub.mutate(|t| t.apply(&self.user, LifecycleEvent::Error, Some(reason)));
                return true;
            }
            Err(e) => {
                self.hub
                    .mutate(|t| t.apply(&self.user, LifecycleEvent::Error, Some(format!("status query failed: {e}"))));
                return true;
            }
        };
        let Some(phase) = self.phase() else { return true };
        use LifecyclePhase as P;
        let step = match (phase, &status) {
            (P::Pending, ExecutionStatus::Running { .. }) => Some((LifecycleEvent::SchedulerRunning, None)),
            (P::Pending | P::Starting, ExecutionStatus::Exited { code }) => Some((
                LifecycleEvent::Error,
                Some(format!("server exited before reporting its address (exit code {code:?})")),
            )),
            (P::Running, ExecutionStatus::Exited { code }) => {
                Some((LifecycleEvent::ExitObserved, Some(format!("server exited (exit code {code:?})"))))
            }
            (P::Pending | P::Starting | P::Running, ExecutionStatus::Unknown) => {
                Some((LifecycleEvent::Error, Some("job is no longer known to the scheduler".to_string())))
            }
            _ => None,
        };
        let rec = self.hub.mutate(|t| {
            self.save_spawner_state(t);
            match step {
                Some((event, reason)) => t.apply(&self.user, event, reason),
                None => t.session(&self.user).cloned(),
            }
        });
        rec.is_none_or(|r| r.phase.is_terminal())
    }

    async fn timeout(&mut self) {
        let secs = self.hub.config.timeouts.startup;
        self.hub
            .mutate(|t| t.apply(&self.user, LifecycleEvent::Timeout, Some(format!("startup timeout ({secs}s)"))));
        if let Err(e) = self.call(|s| s.stop()).await {
            warn!(user = %self.user, "cancelling timed-out session: {e}");
        }
    }

    async fn stop(&mut self) -> SessionRecord {
        self.hub.mutate(|t| {
            t.remove_route(&self.prefix);
            let rec = t.apply(&self.user, LifecycleEvent::StopRequested, None);
            if let Some(rec) = rec {
                t.state.revoke_token(&rec.token_id);
            }
        });
        self.finish_stop().await
    }

    async fn finish_stop(&mut self) -> SessionRecord {
        let result = self.call(|s| s.stop()).await;
        self.hub.mutate(|t| {
            self.save_spawner_state(t);
            let rec = match result {
                Ok(()) | Err(SpawnError::NotRunning) => t.apply(&self.user, LifecycleEvent::ExitObserved, None),
                Err(e) => t.apply(&self.user, LifecycleEvent::Error, Some(format!("stop failed: {e}"))),
            };
            rec.expect("session exists")
        })
    }
}
