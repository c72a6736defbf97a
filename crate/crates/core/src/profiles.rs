//! Administrator-defined profiles and the wrapping spawner that lets a user
//! pick one at spawn time.
//!
//! The only user-supplied datum is a profile id. It selects a profile; it is
//! never copied into the resulting spawner configuration.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfigMap, ExecutionStatus, Profile, Scalar};
use crate::spawner::{SpawnError, SpawnRequest, Spawner, SpawnerDescriptor, SpawnerRegistry, SpawnerStateMap};

pub const PROFILES_KIND: &str = "profiles";
pub const WRAPPED_KIND_KEY: &str = "wrapped.kind";
pub const WRAPPED_CONFIG_KEY: &str = "wrapped.config";

/// Name of the single options form field.
pub const PROFILE_FIELD: &str = "profile";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CatalogError {
    #[error("profile catalog is empty")]
    Empty,
    #[error("duplicate profile id {0:?}")]
    DuplicateId(String),
    #[error("default profile {0:?} is not in the catalog")]
    MissingDefault(String),
    #[error("profile {id:?} uses unregistered spawner kind {kind:?}")]
    UnregisteredKind { id: String, kind: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown profile {0:?}")]
pub struct UnknownProfile(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCatalog", into = "RawCatalog")]
pub struct ProfileCatalog {
    profiles: Vec<Profile>,
    default_profile_id: String,
}

#[derive(Serialize, Deserialize)]
struct RawCatalog {
    #[serde(default)]
    default_profile_id: Option<String>,
    profiles: Vec<Profile>,
}

impl TryFrom<RawCatalog> for ProfileCatalog {
    type Error = CatalogError;

    fn try_from(raw: RawCatalog) -> Result<Self, Self::Error> {
        let default = match raw.default_profile_id {
            Some(id) => id,
            None => raw.profiles.first().ok_or(CatalogError::Empty)?.id.clone(),
        };
        ProfileCatalog::new(raw.profiles, default)
    }
}

impl From<ProfileCatalog> for RawCatalog {
    fn from(c: ProfileCatalog) -> Self {
        RawCatalog {
            default_profile_id: Some(c.default_profile_id),
            profiles: c.profiles,
        }
    }
}

impl ProfileCatalog {
    pub fn new(profiles: Vec<Profile>, default_profile_id: impl Into<String>) -> Result<Self, CatalogError> {
        let default_profile_id = default_profile_id.into();
        if profiles.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut seen = HashSet::new();
        for p in &profiles {
            if !seen.insert(p.id.as_str()) {
                return Err(CatalogError::DuplicateId(p.id.clone()));
            }
        }
        if !seen.contains(default_profile_id.as_str()) {
            return Err(CatalogError::MissingDefault(default_profile_id));
        }
        Ok(ProfileCatalog {
            profiles,
            default_profile_id,
        })
    }

    pub fn profiles(&self) -> &[Profile] {
        &self.profiles
    }

    pub fn default_profile_id(&self) -> &str {
        &self.default_profile_id
    }

    pub fn get(&self, id: &str) -> Option<&Profile> {
        self.profiles.iter().find(|p| p.id == id)
    }

    /// Check every profile names a spawner kind known to `registry`.
    pub fn check_kinds(&self, registry: &SpawnerRegistry) -> Result<(), CatalogError> {
        match self.profiles.iter().find(|p| !registry.contains(&p.spawner_kind)) {
            Some(p) => Err(CatalogError::UnregisteredKind {
                id: p.id.clone(),
                kind: p.spawner_kind.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormChoice {
    pub id: String,
    pub display_name: String,
}

/// The dropdown presented before a spawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionsFormSpec {
    pub field_name: String,
    pub choices: Vec<FormChoice>,
    pub selected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OptionsSelection {
    /// Absent when the user submitted no form; the default profile applies.
    #[serde(default)]
    pub profile_id: Option<String>,
}

impl OptionsSelection {
    pub fn profile(id: impl Into<String>) -> Self {
        OptionsSelection {
            profile_id: Some(id.into()),
        }
    }
}

pub fn build_options_form(catalog: &ProfileCatalog) -> OptionsFormSpec {
    OptionsFormSpec {
        field_name: PROFILE_FIELD.to_string(),
        choices: catalog
            .profiles
            .iter()
            .map(|p| FormChoice {
                id: p.id.clone(),
                display_name: p.display_name.clone(),
            })
            .collect(),
        selected: catalog.default_profile_id.clone(),
    }
}

/// Resolve a user's choice to the matching profile and its descriptor.
pub fn apply_selection<'a>(
    catalog: &'a ProfileCatalog,
    selection: &OptionsSelection,
) -> Result<(&'a Profile, SpawnerDescriptor), UnknownProfile> {
    let id = selection
        .profile_id
        .as_deref()
        .unwrap_or(&catalog.default_profile_id);
    let profile = catalog.get(id).ok_or_else(|| UnknownProfile(id.to_string()))?;
    let descriptor = SpawnerDescriptor {
        kind: profile.spawner_kind.clone(),
        config: profile.config.clone(),
    };
    Ok((profile, descriptor))
}

/// A starter catalog: one batch job type per builtin scheduler dialect and a
/// local-process profile, all launching `server_cmd`.
pub fn example_catalog(server_cmd: &str) -> ProfileCatalog {
    let batch = |id: &str, name: &str, adapter: &str, extra: &[(&str, &str)]| {
        let mut config = ConfigMap::from([
            ("adapter".to_string(), Scalar::from(adapter)),
            ("cmd".to_string(), Scalar::from(server_cmd)),
        ]);
        config.extend(extra.iter().map(|(k, v)| (k.to_string(), Scalar::from(*v))));
        Profile {
            id: id.to_string(),
            display_name: name.to_string(),
            spawner_kind: "batch".to_string(),
            config,
        }
    };
    let profiles = vec![
        batch("torque-small", "Torque: 1 core, 2 GB, 1 hour", "torque", &[]),
        batch(
            "slurm-highmem",
            "SLURM: 4 cores, 16 GB, 4 hours",
            "slurm",
            &[("nprocs", "4"), ("mem", "16gb"), ("runtime", "04:00:00")],
        ),
        batch("condor-standard", "Condor: 1 core, 2 GB", "condor", &[]),
        batch(
            "gridengine-short",
            "Grid Engine: 2 cores, 30 minutes",
            "gridengine",
            &[("nprocs", "2"), ("runtime", "00:30:00")],
        ),
        Profile {
            id: "local".to_string(),
            display_name: "Local process on the gateway host".to_string(),
            spawner_kind: "local".to_string(),
            config: ConfigMap::from([("cmd".to_string(), Scalar::from(server_cmd))]),
        },
    ];
    ProfileCatalog::new(profiles, "torque-small").expect("example catalog is valid")
}

/// Delegates every call to an inner spawner built from a descriptor, and
/// folds the descriptor into the persisted state so a fresh wrapper can
/// rebuild the same inner spawner from the state alone.
pub struct ProfilesSpawner {
    registry: Arc<SpawnerRegistry>,
    descriptor: Option<SpawnerDescriptor>,
    inner: Option<Box<dyn Spawner>>,
}

impl ProfilesSpawner {
    /// An empty wrapper, to be filled by `load_state`.
    pub fn new(registry: Arc<SpawnerRegistry>) -> Self {
        ProfilesSpawner {
            registry,
            descriptor: None,
            inner: None,
        }
    }

    pub fn with_descriptor(registry: Arc<SpawnerRegistry>, descriptor: SpawnerDescriptor) -> Result<Self, SpawnError> {
        let inner = registry.build(&descriptor)?;
        Ok(ProfilesSpawner {
            registry,
            descriptor: Some(descriptor),
            inner: Some(inner),
        })
    }

    pub fn descriptor(&self) -> Option<&SpawnerDescriptor> {
        self.descriptor.as_ref()
    }

    fn inner(&mut self) -> Result<&mut Box<dyn Spawner>, SpawnError> {
        self.inner.as_mut().ok_or(SpawnError::NotRunning)
    }
}

impl Spawner for ProfilesSpawner {
    fn kind(&self) -> &str {
        PROFILES_KIND
    }

    fn start(&mut self, request: &SpawnRequest) -> Result<(), SpawnError> {
        self.inner
            .as_mut()
            .ok_or_else(|| SpawnError::StartFailed("no profile selected".into()))?
            .start(request)
    }

    fn stop(&mut self) -> Result<(), SpawnError> {
        self.inner()?.stop()
    }

    fn poll(&mut self) -> Result<ExecutionStatus, SpawnError> {
        match self.inner.as_mut() {
            Some(inner) => inner.poll(),
            None => Ok(ExecutionStatus::Unknown),
        }
    }

    fn record_address(&mut self, host: &str, port: u16) {
        if let Some(inner) = self.inner.as_mut() {
            inner.record_address(host, port);
        }
    }

    fn get_state(&self) -> SpawnerStateMap {
        let mut map = self
            .inner
            .as_ref()
            .map(|i| i.get_state())
            .unwrap_or_default();
        if let Some(d) = &self.descriptor {
            map.insert(WRAPPED_KIND_KEY.into(), d.kind.clone());
            map.insert(
                WRAPPED_CONFIG_KEY.into(),
                serde_json::to_string(&d.config).expect("config map serializes"),
            );
        }
        map
    }

    fn load_state(&mut self, state: &SpawnerStateMap) -> Result<(), SpawnError> {
        let kind = state
            .get(WRAPPED_KIND_KEY)
            .ok_or_else(|| SpawnError::MalformedState(format!("missing {WRAPPED_KIND_KEY}")))?;
        let config: ConfigMap = match state.get(WRAPPED_CONFIG_KEY) {
            Some(raw) => serde_json::from_str(raw)
                .map_err(|e| SpawnError::MalformedState(format!("{WRAPPED_CONFIG_KEY}: {e}")))?,
            None => ConfigMap::new(),
        };
        let descriptor = SpawnerDescriptor {
            kind: kind.clone(),
            config,
        };
        let mut inner = self.registry.build(&descriptor)?;
        let inner_state: SpawnerStateMap = state
            .iter()
            .filter(|(k, _)| !k.starts_with("wrapped."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        inner.load_state(&inner_state)?;
        self.descriptor = Some(descriptor);
        self.inner = Some(inner);
        Ok(())
    }
}
