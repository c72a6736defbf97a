//! Persistent hub state: users, session records and live session tokens,
//! stored as one JSON document replaced atomically on every change.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::OpenOptionsExt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use gate_core::{SessionRecord, UserRecord, Username};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const STATE_VERSION: u32 = 1;

/// SHA-256 of a token secret, hex encoded. Records and the token table are
/// keyed by this; the secret itself never appears in logs.
pub fn token_hash(secret: &str) -> String {
    hex::encode(Sha256::digest(secret.as_bytes()))
}

/// Short loggable reference to a token.
pub fn fingerprint(secret: &str) -> String {
    token_hash(secret)[..8].to_string()
}

/// 256 random bits, hex encoded.
pub fn new_secret() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub username: Username,
    pub secret: String,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

impl TokenRecord {
    pub fn is_live(&self, now: DateTime<Utc>) -> bool {
        now < self.expires_at
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubState {
    pub version: u32,
    #[serde(default)]
    pub users: BTreeMap<Username, UserRecord>,
    #[serde(default)]
    pub sessions: BTreeMap<Username, SessionRecord>,
    /// Token hash to token.
    #[serde(default)]
    pub tokens: BTreeMap<String, TokenRecord>,
}

impl Default for HubState {
    fn default() -> Self {
        HubState {
            version: STATE_VERSION,
            users: BTreeMap::new(),
            sessions: BTreeMap::new(),
            tokens: BTreeMap::new(),
        }
    }
}

impl HubState {
    /// Issue a token for `username`; returns the secret and its hash.
    pub fn issue_token(&mut self, username: &Username, ttl: Duration) -> (String, String) {
        let secret = new_secret();
        let hash = token_hash(&secret);
        let now = Utc::now();
        self.tokens.insert(
            hash.clone(),
            TokenRecord {
                username: username.clone(),
                secret: secret.clone(),
                issued_at: now,
                expires_at: now + ttl,
            },
        );
        (secret, hash)
    }

    pub fn revoke_token(&mut self, hash: &str) -> bool {
        self.tokens.remove(hash).is_some()
    }

    /// Owner of a live token.
    pub fn introspect(&self, secret: &str) -> Option<&Username> {
        self.tokens
            .get(&token_hash(secret))
            .filter(|t| t.is_live(Utc::now()) && t.secret == secret)
            .map(|t| &t.username)
    }

    pub fn purge_expired(&mut self) -> usize {
        let now = Utc::now();
        let before = self.tokens.len();
        self.tokens.retain(|_, t| t.is_live(now));
        before - self.tokens.len()
    }
}

#[derive(Debug, Error)]
pub enum StateError {
    #[error("state database {path} is corrupt: {source}")]
    Corrupt { path: PathBuf, source: serde_json::Error },
    #[error("state database {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// A JSON state file. Writes go to a sibling temp file which is synced and
/// renamed over the original, so readers see either the old or the new
/// document.
#[derive(Debug, Clone)]
pub struct StateDb {
    path: PathBuf,
}

impl StateDb {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        StateDb { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Missing or empty files load as an empty state.
    pub fn load(&self) -> Result<HubState, StateError> {
        let io_err = |source| StateError::Io {
            path: self.path.clone(),
            source,
        };
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(HubState::default()),
            Err(e) => return Err(io_err(e)),
        };
        if text.trim().is_empty() {
            return Ok(HubState::default());
        }
        serde_json::from_str(&text).map_err(|source| StateError::Corrupt {
            path: self.path.clone(),
            source,
        })
    }

    pub fn save(&self, state: &HubState) -> Result<(), StateError> {
        let io_err = |source| StateError::Io {
            path: self.path.clone(),
            source,
        };
        let dir = match self.path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let mut tmp_name = self.path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = dir.join(tmp_name);
        let body = serde_json::to_vec_pretty(state).expect("state serializes");
        let mut file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .mode(0o600)
            .open(&tmp)
            .map_err(io_err)?;
        file.write_all(&body).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
        fs::rename(&tmp, &self.path).map_err(io_err)?;
        File::open(&dir).and_then(|d| d.sync_all()).map_err(io_err)?;
        Ok(())
    }
}
