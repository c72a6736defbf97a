//! Domain types shared across the gateway: users, sessions, the session
//! lifecycle state machine and the spawner poll vocabulary.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum accepted username length, in bytes.
pub const MAX_USERNAME_LEN: usize = 64;

fn username_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"^[a-z0-9][a-z0-9._-]{0,63}$").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid username {raw:?}")]
pub struct InvalidUsername {
    pub raw: String,
}

/// A validated, lowercase username.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Username(String);

impl Username {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Username {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Username {
    type Error = InvalidUsername;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        normalize_username(&value)
    }
}

impl From<Username> for String {
    fn from(value: Username) -> Self {
        value.0
    }
}

impl std::str::FromStr for Username {
    type Err = InvalidUsername;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_username(s)
    }
}

/// Fold an identity header value to a canonical username.
///
/// The raw value is lowercased and must then match
/// `^[a-z0-9][a-z0-9._-]{0,63}$` in full. Anything else, including control
/// characters smuggled in by header injection, is rejected.
pub fn normalize_username(raw: &str) -> Result<Username, InvalidUsername> {
    let err = || InvalidUsername { raw: raw.to_string() };
    if raw.len() > MAX_USERNAME_LEN || raw.chars().any(char::is_control) {
        return Err(err());
    }
    let folded = raw.to_lowercase();
    if username_pattern().is_match(&folded) {
        Ok(Username(folded))
    } else {
        Err(err())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub username: Username,
    pub created_at: DateTime<Utc>,
    pub admin: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifecyclePhase {
    Idle,
    Submitting,
    Pending,
    Starting,
    Running,
    Stopping,
    Stopped,
    Failed,
}

impl LifecyclePhase {
    pub const ALL: [LifecyclePhase; 8] = [
        LifecyclePhase::Idle,
        LifecyclePhase::Submitting,
        LifecyclePhase::Pending,
        LifecyclePhase::Starting,
        LifecyclePhase::Running,
        LifecyclePhase::Stopping,
        LifecyclePhase::Stopped,
        LifecyclePhase::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, LifecyclePhase::Stopped | LifecyclePhase::Failed)
    }

    /// Phases in which a session holds (or is acquiring) backend resources.
    pub fn is_active(self) -> bool {
        !self.is_terminal() && self != LifecyclePhase::Idle
    }
}

impl fmt::Display for LifecyclePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifecycleEvent {
    SpawnRequested,
    Submitted,
    SchedulerRunning,
    CallbackReceived,
    StopRequested,
    ExitObserved,
    Timeout,
    Error,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 8] = [
        LifecycleEvent::SpawnRequested,
        LifecycleEvent::Submitted,
        LifecycleEvent::SchedulerRunning,
        LifecycleEvent::CallbackReceived,
        LifecycleEvent::StopRequested,
        LifecycleEvent::ExitObserved,
        LifecycleEvent::Timeout,
        LifecycleEvent::Error,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition: {event:?} in phase {phase:?}")]
pub struct IllegalTransition {
    pub phase: LifecyclePhase,
    pub event: LifecycleEvent,
}

/// The session lifecycle transition function.
///
/// `Stopped` and `Failed` accept no events, `Error` included; leaving them
/// requires replacing the record with a fresh `Idle` one.
pub fn session_transition(
    phase: LifecyclePhase,
    event: LifecycleEvent,
) -> Result<LifecyclePhase, IllegalTransition> {
    use LifecycleEvent as E;
    use LifecyclePhase as P;

    let next = match (phase, event) {
        (P::Idle, E::SpawnRequested) => P::Submitting,
        (P::Submitting, E::Submitted) => P::Pending,
        (P::Pending, E::SchedulerRunning) => P::Starting,
        (P::Starting, E::CallbackReceived) => P::Running,
        (P::Stopping, E::ExitObserved) => P::Stopped,
        (P::Running, E::ExitObserved) => P::Failed,
        (P::Pending | P::Starting, E::Timeout) => P::Failed,
        (p, E::StopRequested) if !p.is_terminal() => P::Stopping,
        (p, E::Error) if !p.is_terminal() => P::Failed,
        _ => return Err(IllegalTransition { phase, event }),
    };
    Ok(next)
}

/// What a spawner knows about its backend at the moment of a poll.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExecutionStatus {
    Pending,
    /// The process or job is running. `host` is known once the scheduler
    /// reports placement; `port` only after the server's callback.
    Running {
        host: Option<String>,
        port: Option<u16>,
    },
    Exited {
        code: Option<i32>,
    },
    Unknown,
}

impl ExecutionStatus {
    pub fn running(host: impl Into<String>, port: Option<u16>) -> Self {
        ExecutionStatus::Running {
            host: Some(host.into()),
            port,
        }
    }

    pub fn is_running(&self) -> bool {
        matches!(self, ExecutionStatus::Running { .. })
    }

    /// `host:port` when both halves are known.
    pub fn address(&self) -> Option<String> {
        match self {
            ExecutionStatus::Running {
                host: Some(h),
                port: Some(p),
            } => Some(format!("{h}:{p}")),
            _ => None,
        }
    }
}

/// Scalar configuration value as found in profile and spawner config blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Float(x) => write!(f, "{x}"),
            Scalar::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Scalar {
    fn from(value: &str) -> Self {
        Scalar::Str(value.to_string())
    }
}

impl From<String> for Scalar {
    fn from(value: String) -> Self {
        Scalar::Str(value)
    }
}

impl From<i64> for Scalar {
    fn from(value: i64) -> Self {
        Scalar::Int(value)
    }
}

pub type ConfigMap = BTreeMap<String, Scalar>;

/// An administrator-defined, user-selectable spawner configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub id: String,
    pub display_name: String,
    pub spawner_kind: String,
    #[serde(default)]
    pub config: ConfigMap,
}

/// Persistent per-user server record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub username: Username,
    pub phase: LifecyclePhase,
    pub spawner_kind: String,
    #[serde(default)]
    pub profile_id: Option<String>,
    #[serde(default)]
    pub spawner_state: BTreeMap<String, String>,
    /// Backend URL, present exactly while `phase` is `Running`.
    #[serde(default)]
    pub address: Option<String>,
    pub token_id: String,
    #[serde(default)]
    pub requested_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub stopped_at: Option<DateTime<Utc>>,
    pub phase_since: DateTime<Utc>,
    #[serde(default)]
    pub failure_reason: Option<String>,
}

impl SessionRecord {
    /// A fresh record in `Idle`, ready to receive `SpawnRequested`.
    pub fn new(username: Username, spawner_kind: impl Into<String>, token_id: String) -> Self {
        SessionRecord {
            username,
            phase: LifecyclePhase::Idle,
            spawner_kind: spawner_kind.into(),
            profile_id: None,
            spawner_state: BTreeMap::new(),
            address: None,
            token_id,
            requested_at: None,
            started_at: None,
            stopped_at: None,
            phase_since: Utc::now(),
            failure_reason: None,
        }
    }

    /// Apply a lifecycle event, maintaining timestamps and the
    /// address-iff-running invariant.
    pub fn apply(&mut self, event: LifecycleEvent) -> Result<LifecyclePhase, IllegalTransition> {
        let next = session_transition(self.phase, event)?;
        let now = Utc::now();
        match next {
            LifecyclePhase::Submitting => self.requested_at = Some(now),
            LifecyclePhase::Running => self.started_at = Some(now),
            LifecyclePhase::Stopped | LifecyclePhase::Failed => self.stopped_at = Some(now),
            _ => {}
        }
        if next != LifecyclePhase::Running {
            self.address = None;
        }
        self.phase = next;
        self.phase_since = now;
        Ok(next)
    }

    pub fn fail(&mut self, event: LifecycleEvent, reason: impl Into<String>) -> Result<(), IllegalTransition> {
        self.apply(event)?;
        self.failure_reason = Some(reason.into());
        Ok(())
    }
}
