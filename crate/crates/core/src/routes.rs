//! The dynamic routing table: path prefixes mapped to backend addresses,
//! with longest-segment-prefix lookup and atomic snapshot replacement.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed route prefix {0:?}")]
pub struct MalformedPrefix(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub path_prefix: String,
    /// `host:port` of the backend.
    pub target: String,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target<'a> {
    /// No route matched; the request belongs to the hub.
    Default,
    Route(&'a RouteEntry),
}

/// Normalize a route prefix: leading slash, no trailing slash except for the
/// root, no empty, `.` or `..` segments.
pub fn normalize_prefix(prefix: &str) -> Result<String, MalformedPrefix> {
    let bad = || MalformedPrefix(prefix.to_string());
    if !prefix.starts_with('/') || prefix.chars().any(|c| c.is_control() || c.is_whitespace() || c == '?' || c == '#') {
        return Err(bad());
    }
    let trimmed = prefix.strip_suffix('/').unwrap_or(prefix);
    if trimmed.is_empty() {
        return Ok("/".to_string());
    }
    if trimmed[1..].split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
        return Err(bad());
    }
    Ok(trimmed.to_string())
}

/// An immutable routing table snapshot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RouteTable {
    routes: BTreeMap<String, RouteEntry>,
    epoch: u64,
}

impl RouteTable {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn entries(&self) -> impl Iterator<Item = &RouteEntry> {
        self.routes.values()
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn get(&self, prefix: &str) -> Option<&RouteEntry> {
        self.routes.get(prefix)
    }

    /// Longest registered prefix that is a path-segment prefix of `path`.
    pub fn lookup(&self, path: &str) -> Target<'_> {
        let path = path.split(['?', '#']).next().unwrap_or("");
        let mut candidate = path.strip_suffix('/').unwrap_or(path);
        loop {
            if let Some(entry) = self.routes.get(if candidate.is_empty() { "/" } else { candidate }) {
                return Target::Route(entry);
            }
            match candidate.rfind('/') {
                Some(0) if !candidate.is_empty() => candidate = "",
                Some(i) if i > 0 => candidate = &candidate[..i],
                _ => return Target::Default,
            }
        }
    }

    fn with_route(&self, prefix: String, target: String) -> RouteTable {
        let mut next = self.clone();
        next.epoch += 1;
        next.routes.insert(
            prefix.clone(),
            RouteEntry {
                path_prefix: prefix,
                target,
                epoch: next.epoch,
            },
        );
        next
    }

    fn without_route(&self, prefix: &str) -> RouteTable {
        let mut next = self.clone();
        next.epoch += 1;
        next.routes.remove(prefix);
        next
    }
}

/// Shared routing table. Readers take cheap snapshots; writers are
/// serialized and publish a whole new table per mutation.
#[derive(Debug, Default)]
pub struct Routes {
    current: RwLock<Arc<RouteTable>>,
    writer: Mutex<()>,
}

impl Routes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Arc<RouteTable> {
        self.current.read().expect("route table lock").clone()
    }

    fn publish(&self, table: RouteTable) -> u64 {
        let epoch = table.epoch;
        *self.current.write().expect("route table lock") = Arc::new(table);
        epoch
    }

    /// Add or replace a route; returns the new epoch.
    pub fn add_route(&self, prefix: &str, target: &str) -> Result<u64, MalformedPrefix> {
        let prefix = normalize_prefix(prefix)?;
        let _w = self.writer.lock().expect("route writer lock");
        let next = self.snapshot().with_route(prefix, target.to_string());
        Ok(self.publish(next))
    }

    /// Remove a route. Removing an absent prefix changes nothing and returns
    /// the current epoch.
    pub fn remove_route(&self, prefix: &str) -> Result<u64, MalformedPrefix> {
        let prefix = normalize_prefix(prefix)?;
        let _w = self.writer.lock().expect("route writer lock");
        let current = self.snapshot();
        if current.get(&prefix).is_none() {
            return Ok(current.epoch);
        }
        let next = current.without_route(&prefix);
        Ok(self.publish(next))
    }

    pub fn lookup_target(&self, path: &str) -> Option<RouteEntry> {
        match self.snapshot().lookup(path) {
            Target::Route(e) => Some(e.clone()),
            Target::Default => None,
        }
    }
}
