//! Batch-scheduler spawning: render a job script, submit it, track the job
//! by its identifier, and query or cancel it with templated commands.

use std::fs;
use std::io::Write;
use std::os::unix::fs::OpenOptionsExt;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use log::{debug, info};
use thiserror::Error;

use crate::model::{ConfigMap, ExecutionStatus};
use crate::spawner::{
    parse_state_field, SpawnError, SpawnRequest, Spawner, SpawnerRegistry, SpawnerStateMap,
    ENV_GATEWAY_URL, ENV_PATH_PREFIX, ENV_SESSION_TOKEN,
};

pub mod adapter;
pub mod command;
pub mod template;

pub use adapter::{builtin_adapter_specs, builtin_adapters, AdapterSpec, ParamSpec, SchedulerAdapter};
pub use command::{CommandOutput, CommandRunner, ProcessRunner, RecordingRunner};
pub use template::{render_template, TemplateError, TemplateVars};

pub const BATCH_KIND: &str = "batch";
/// Profile config key naming the adapter a batch profile uses.
pub const ADAPTER_KEY: &str = "adapter";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("cannot tokenize rendered command: {0}")]
    Tokenize(String),
    #[error("submit failed: {0}")]
    SubmitFailed(String),
    #[error("no job id in submit output {0:?}")]
    JobIdParseError(String),
    #[error("status query failed: {0}")]
    QueryFailed(String),
    #[error("cancel failed: {0}")]
    CancelFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobDescriptor {
    pub job_id: String,
    pub adapter_name: String,
    pub submitted_at: DateTime<Utc>,
}

/// Render `template` and split it into an argument vector.
pub fn command_argv(template: &str, vars: &TemplateVars) -> Result<Vec<String>, BatchError> {
    let rendered = render_template(template, vars)?;
    let argv = shell_words::split(&rendered).map_err(|e| BatchError::Tokenize(e.to_string()))?;
    if argv.is_empty() {
        return Err(BatchError::Tokenize("empty command".into()));
    }
    Ok(argv)
}

fn job_vars(job_id: &str) -> TemplateVars {
    let mut vars = TemplateVars::new();
    vars.set("job_id", job_id);
    vars
}

pub fn submit(
    runner: &dyn CommandRunner,
    adapter: &SchedulerAdapter,
    vars: &TemplateVars,
    script_body: &str,
) -> Result<JobDescriptor, BatchError> {
    let argv = command_argv(&adapter.spec().submit_command, vars)?;
    let out = runner
        .run(&argv, Some(script_body))
        .map_err(|e| BatchError::SubmitFailed(e.to_string()))?;
    if !out.success() {
        return Err(BatchError::SubmitFailed(out.stderr.trim().to_string()));
    }
    let job_id = adapter
        .parse_job_id(&out.stdout)
        .ok_or_else(|| BatchError::JobIdParseError(out.stdout.clone()))?;
    Ok(JobDescriptor {
        job_id,
        adapter_name: adapter.name().to_string(),
        submitted_at: Utc::now(),
    })
}

pub fn query(
    runner: &dyn CommandRunner,
    adapter: &SchedulerAdapter,
    job_id: &str,
) -> Result<ExecutionStatus, BatchError> {
    let argv = command_argv(&adapter.spec().status_command, &job_vars(job_id))?;
    let out = runner
        .run(&argv, None)
        .map_err(|e| BatchError::QueryFailed(e.to_string()))?;
    if let Some(host) = adapter.match_running(&out.stdout) {
        return Ok(ExecutionStatus::running(host, None));
    }
    if adapter.match_pending(&out.stdout) {
        return Ok(ExecutionStatus::Pending);
    }
    if out.success() || adapter.match_unknown(&out.stdout) || adapter.match_unknown(&out.stderr) {
        return Ok(ExecutionStatus::Unknown);
    }
    Err(BatchError::QueryFailed(out.stderr.trim().to_string()))
}

/// Cancel a job. Cancelling a job the scheduler no longer knows succeeds.
pub fn cancel(
    runner: &dyn CommandRunner,
    adapter: &SchedulerAdapter,
    job_id: &str,
) -> Result<(), BatchError> {
    let argv = command_argv(&adapter.spec().cancel_command, &job_vars(job_id))?;
    let out = runner
        .run(&argv, None)
        .map_err(|e| BatchError::CancelFailed(e.to_string()))?;
    if out.success() || adapter.match_unknown(&out.stdout) || adapter.match_unknown(&out.stderr) {
        Ok(())
    } else {
        Err(BatchError::CancelFailed(out.stderr.trim().to_string()))
    }
}

/// Register the `batch` kind. Profiles pick one of `adapters` by name with
/// the `adapter` config key; every instance shares `runner`.
pub fn register_batch(
    registry: &mut SpawnerRegistry,
    adapters: impl IntoIterator<Item = SchedulerAdapter>,
    runner: Arc<dyn CommandRunner>,
    base: TemplateVars,
    spool_dir: Option<PathBuf>,
) {
    let adapters: Vec<Arc<SchedulerAdapter>> = adapters.into_iter().map(Arc::new).collect();
    registry.register(BATCH_KIND, move |config| {
        let name = config
            .get(ADAPTER_KEY)
            .ok_or_else(|| SpawnError::InvalidConfig(format!("batch profile needs `{ADAPTER_KEY}`")))?
            .to_string();
        let adapter = adapters
            .iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| SpawnError::InvalidConfig(format!("unknown adapter {name:?}")))?;
        let spawner = BatchSpawner::new(adapter.clone(), runner.clone(), config, &base, spool_dir.clone())?;
        Ok(Box::new(spawner))
    });
}

/// Launches user servers as batch jobs through a [`SchedulerAdapter`].
pub struct BatchSpawner {
    adapter: Arc<SchedulerAdapter>,
    runner: Arc<dyn CommandRunner>,
    vars: TemplateVars,
    spool_dir: Option<PathBuf>,
    job: Option<JobDescriptor>,
    host: Option<String>,
    port: Option<u16>,
    stopped: bool,
}

impl std::fmt::Debug for BatchSpawner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchSpawner")
            .field("adapter", &self.adapter.name())
            .field("job", &self.job)
            .field("host", &self.host)
            .field("port", &self.port)
            .field("stopped", &self.stopped)
            .finish()
    }
}

impl BatchSpawner {
    /// Build a spawner from adapter defaults, hub-supplied `base` values and
    /// the profile `config` (later sources win). Config keys must be
    /// declared adapter parameters; the `adapter` key itself is skipped.
    pub fn new(
        adapter: Arc<SchedulerAdapter>,
        runner: Arc<dyn CommandRunner>,
        config: &ConfigMap,
        base: &TemplateVars,
        spool_dir: Option<PathBuf>,
    ) -> Result<Self, SpawnError> {
        let mut vars = TemplateVars::new();
        for p in adapter.parameters() {
            if let Some(default) = &p.default {
                if p.raw {
                    vars.set_raw(&p.name, default);
                } else {
                    vars.set(&p.name, default);
                }
            }
        }
        vars.extend(base);
        for (key, value) in config {
            if key == ADAPTER_KEY {
                continue;
            }
            let param = adapter.parameter(key).ok_or_else(|| {
                SpawnError::InvalidConfig(format!(
                    "{key:?} is not a parameter of adapter {}",
                    adapter.name()
                ))
            })?;
            if param.raw {
                vars.set_raw(key, value.to_string());
            } else {
                vars.set(key, value.to_string());
            }
        }
        Ok(BatchSpawner {
            adapter,
            runner,
            vars,
            spool_dir,
            job: None,
            host: None,
            port: None,
            stopped: false,
        })
    }

    pub fn adapter(&self) -> &SchedulerAdapter {
        &self.adapter
    }

    pub fn job(&self) -> Option<&JobDescriptor> {
        self.job.as_ref()
    }

    fn write_spool(&self, username: &str, script: &str) -> Result<(), SpawnError> {
        let Some(dir) = &self.spool_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| SpawnError::StartFailed(format!("spool dir: {e}")))?;
        let path = dir.join(format!(
            "{username}-{}.{}.job",
            Utc::now().format("%Y%m%dT%H%M%S%.6f"),
            self.adapter.name()
        ));
        let mut file = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .mode(0o600)
            .open(&path)
            .map_err(|e| SpawnError::StartFailed(format!("{}: {e}", path.display())))?;
        file.write_all(script.as_bytes())
            .map_err(|e| SpawnError::StartFailed(format!("{}: {e}", path.display())))?;
        debug!("job script written to {}", path.display());
        Ok(())
    }
}

impl Spawner for BatchSpawner {
    fn kind(&self) -> &str {
        BATCH_KIND
    }

    fn start(&mut self, request: &SpawnRequest) -> Result<(), SpawnError> {
        if self.job.is_some() && !self.stopped {
            return Err(SpawnError::AlreadyRunning);
        }
        let mut vars = self.vars.clone();
        vars.set("username", request.username.as_str())
            .set("gateway_url", request.required_env(ENV_GATEWAY_URL)?)
            .set("session_token", request.required_env(ENV_SESSION_TOKEN)?)
            .set("path_prefix", request.required_env(ENV_PATH_PREFIX)?);

        // Rendering happens before anything is written or executed.
        let script = render_template(&self.adapter.spec().job_script, &vars).map_err(BatchError::from)?;
        command_argv(&self.adapter.spec().submit_command, &vars)?;

        self.write_spool(request.username.as_str(), &script)?;
        let job = submit(self.runner.as_ref(), &self.adapter, &vars, &script)?;
        info!(
            "submitted job {} via {} for {}",
            job.job_id,
            self.adapter.name(),
            request.username
        );
        self.job = Some(job);
        self.host = None;
        self.port = None;
        self.stopped = false;
        Ok(())
    }

    fn stop(&mut self) -> Result<(), SpawnError> {
        let job = match &self.job {
            Some(job) if !self.stopped => job,
            _ => return Err(SpawnError::NotRunning),
        };
        cancel(self.runner.as_ref(), &self.adapter, &job.job_id)?;
        self.stopped = true;
        Ok(())
    }

    fn poll(&mut self) -> Result<ExecutionStatus, SpawnError> {
        let Some(job) = &self.job else {
            return Ok(ExecutionStatus::Unknown);
        };
        let status = query(self.runner.as_ref(), &self.adapter, &job.job_id).map_err(|e| match e {
            BatchError::QueryFailed(msg) => SpawnError::QueryFailed(msg),
            other => SpawnError::Batch(other),
        })?;
        Ok(match status {
            ExecutionStatus::Running { host, .. } => {
                if host.is_some() {
                    self.host = host;
                }
                ExecutionStatus::Running {
                    host: self.host.clone(),
                    port: self.port,
                }
            }
            other => other,
        })
    }

    fn record_address(&mut self, host: &str, port: u16) {
        if self.host.is_none() {
            self.host = Some(host.to_string());
        }
        self.port = Some(port);
    }

    fn get_state(&self) -> SpawnerStateMap {
        let mut map = SpawnerStateMap::new();
        if let Some(job) = &self.job {
            map.insert("job_id".into(), job.job_id.clone());
            map.insert("adapter".into(), job.adapter_name.clone());
            map.insert("submitted_at".into(), job.submitted_at.to_rfc3339());
        }
        if let Some(host) = &self.host {
            map.insert("host".into(), host.clone());
        }
        if let Some(port) = self.port {
            map.insert("port".into(), port.to_string());
        }
        if self.stopped {
            map.insert("stopped".into(), "true".into());
        }
        map
    }

    fn load_state(&mut self, state: &SpawnerStateMap) -> Result<(), SpawnError> {
        let job_id = state
            .get("job_id")
            .filter(|id| !id.is_empty())
            .ok_or_else(|| SpawnError::MalformedState("missing job_id".into()))?;
        let adapter_name = state.get("adapter").map(String::as_str).unwrap_or(self.adapter.name());
        if adapter_name != self.adapter.name() {
            return Err(SpawnError::MalformedState(format!(
                "state belongs to adapter {adapter_name}, not {}",
                self.adapter.name()
            )));
        }
        let submitted_at = match state.get("submitted_at") {
            Some(ts) => DateTime::parse_from_rfc3339(ts)
                .map_err(|e| SpawnError::MalformedState(format!("submitted_at: {e}")))?
                .with_timezone(&Utc),
            None => Utc::now(),
        };
        self.job = Some(JobDescriptor {
            job_id: job_id.clone(),
            adapter_name: adapter_name.to_string(),
            submitted_at,
        });
        self.host = state.get("host").cloned();
        self.port = parse_state_field(state, "port")?;
        self.stopped = parse_state_field(state, "stopped")?.unwrap_or(false);
        Ok(())
    }
}
