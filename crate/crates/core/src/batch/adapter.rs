//! Scheduler dialect definitions: templates for the job script and the
//! submit, status and cancel commands, plus the patterns that read their
//! output.

use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::placeholders;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(default)]
    pub default: Option<String>,
    /// Raw parameters bypass the value whitelist. They may only be set from
    /// configuration, never from request data.
    #[serde(default)]
    pub raw: bool,
}

impl ParamSpec {
    fn new(name: &str, default: Option<&str>) -> Self {
        ParamSpec {
            name: name.to_string(),
            default: default.map(str::to_string),
            raw: false,
        }
    }
}

/// Parameters every builtin adapter declares. The first six are filled in
/// by the batch spawner itself.
pub fn standard_parameters() -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("username", None),
        ParamSpec::new("job_id", None),
        ParamSpec::new("gateway_url", None),
        ParamSpec::new("session_token", None),
        ParamSpec::new("path_prefix", None),
        ParamSpec {
            name: "cmd".into(),
            default: None,
            raw: true,
        },
        ParamSpec::new("mem", Some("2gb")),
        ParamSpec::new("nprocs", Some("1")),
        ParamSpec::new("runtime", Some("01:00:00")),
        ParamSpec::new("queue", Some("interactive")),
        ParamSpec::new("host", None),
    ]
}

/// Serializable form of an adapter, as written in the hub config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub name: String,
    pub submit_command: String,
    pub status_command: String,
    pub cancel_command: String,
    pub job_script: String,
    pub job_id_pattern: String,
    pub pending_pattern: String,
    pub running_pattern: String,
    /// Matches tool output that means "no such job" on a nonzero exit.
    #[serde(default)]
    pub unknown_pattern: Option<String>,
    #[serde(default = "standard_parameters")]
    pub parameters: Vec<ParamSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("adapter {adapter}: bad {field}: {reason}")]
    BadPattern {
        adapter: String,
        field: &'static str,
        reason: String,
    },
    #[error("adapter {adapter}: {field} uses undeclared placeholder {name:?}")]
    UndeclaredPlaceholder {
        adapter: String,
        field: &'static str,
        name: String,
    },
    #[error("adapter {adapter}: {field} is not a valid template: {reason}")]
    BadTemplate {
        adapter: String,
        field: &'static str,
        reason: String,
    },
    #[error("adapter {adapter}: parameter {name:?} declared twice")]
    DuplicateParameter { adapter: String, name: String },
}

/// A validated adapter with compiled patterns. Immutable once built.
#[derive(Debug, Clone)]
pub struct SchedulerAdapter {
    spec: AdapterSpec,
    job_id: Regex,
    pending: Regex,
    running: Regex,
    unknown: Option<Regex>,
}

impl SchedulerAdapter {
    pub fn new(spec: AdapterSpec) -> Result<Self, AdapterError> {
        let compile = |field: &'static str, pattern: &str| {
            Regex::new(pattern).map_err(|e| AdapterError::BadPattern {
                adapter: spec.name.clone(),
                field,
                reason: e.to_string(),
            })
        };
        let job_id = compile("job_id_pattern", &spec.job_id_pattern)?;
        if job_id.captures_len() < 2 {
            return Err(AdapterError::BadPattern {
                adapter: spec.name.clone(),
                field: "job_id_pattern",
                reason: "needs one capture group".into(),
            });
        }
        let pending = compile("pending_pattern", &spec.pending_pattern)?;
        let running = compile("running_pattern", &spec.running_pattern)?;
        if !running.capture_names().any(|n| n == Some("host")) {
            return Err(AdapterError::BadPattern {
                adapter: spec.name.clone(),
                field: "running_pattern",
                reason: "needs a named capture `host`".into(),
            });
        }
        let unknown = spec
            .unknown_pattern
            .as_deref()
            .map(|p| compile("unknown_pattern", p))
            .transpose()?;

        let mut declared = BTreeSet::new();
        for p in &spec.parameters {
            if !declared.insert(p.name.as_str()) {
                return Err(AdapterError::DuplicateParameter {
                    adapter: spec.name.clone(),
                    name: p.name.clone(),
                });
            }
        }
        for (field, template) in [
            ("submit_command", &spec.submit_command),
            ("status_command", &spec.status_command),
            ("cancel_command", &spec.cancel_command),
            ("job_script", &spec.job_script),
        ] {
            let used = placeholders(template).map_err(|e| AdapterError::BadTemplate {
                adapter: spec.name.clone(),
                field,
                reason: e.to_string(),
            })?;
            if let Some(name) = used.iter().find(|n| !declared.contains(n.as_str())) {
                return Err(AdapterError::UndeclaredPlaceholder {
                    adapter: spec.name.clone(),
                    field,
                    name: name.clone(),
                });
            }
        }
        Ok(SchedulerAdapter {
            spec,
            job_id,
            pending,
            running,
            unknown,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[ParamSpec] {
        &self.spec.parameters
    }

    pub fn parameter(&self, name: &str) -> Option<&ParamSpec> {
        self.spec.parameters.iter().find(|p| p.name == name)
    }

    pub fn parse_job_id(&self, stdout: &str) -> Option<String> {
        self.job_id
            .captures(stdout)
            .and_then(|c| c.get(1))
            .map(|m| m.as_str().to_string())
            .filter(|id| !id.is_empty())
    }

    /// Running host if the output matches the running pattern.
    pub fn match_running(&self, stdout: &str) -> Option<String> {
        self.running
            .captures(stdout)
            .and_then(|c| c.name("host"))
            .map(|m| m.as_str().to_string())
    }

    pub fn match_pending(&self, stdout: &str) -> bool {
        self.pending.is_match(stdout)
    }

    pub fn match_unknown(&self, output: &str) -> bool {
        self.unknown.as_ref().is_some_and(|re| re.is_match(output))
    }
}

const SHELL_EXPORTS: &str = "export GATEWAY_URL={gateway_url}
export SESSION_TOKEN={session_token}
export PATH_PREFIX={path_prefix}
export PORT=0
exec {cmd}
";

fn spec(
    name: &str,
    commands: [&str; 3],
    job_script: String,
    patterns: [&str; 4],
) -> AdapterSpec {
    let [submit, status, cancel] = commands;
    let [job_id, pending, running, unknown] = patterns;
    AdapterSpec {
        name: name.to_string(),
        submit_command: submit.to_string(),
        status_command: status.to_string(),
        cancel_command: cancel.to_string(),
        job_script,
        job_id_pattern: job_id.to_string(),
        pending_pattern: pending.to_string(),
        running_pattern: running.to_string(),
        unknown_pattern: Some(unknown.to_string()),
        parameters: standard_parameters(),
    }
}

/// Torque, SLURM, Condor and Grid Engine style adapters. They differ only in
/// template strings and patterns.
pub fn builtin_adapter_specs() -> Vec<AdapterSpec> {
    vec![
        spec(
            "torque",
            ["qsub", "qstat -f {job_id}", "qdel {job_id}"],
            format!(
                "#!/bin/sh
#PBS -N gateway-{{username}}
#PBS -q {{queue}}
#PBS -l walltime={{runtime}}
#PBS -l nodes=1:ppn={{nprocs}}
#PBS -l mem={{mem}}
{SHELL_EXPORTS}"
            ),
            [
                r"^(\d+)(?:\.\S+)?",
                r"job_state = Q",
                r"(?s)job_state = R.*exec_host = (?P<host>[^/\s]+)",
                r"Unknown Job Id",
            ],
        ),
        spec(
            "slurm",
            ["sbatch", "squeue -h -j {job_id} -o \"%T %B\"", "scancel {job_id}"],
            format!(
                "#!/bin/sh
#SBATCH --job-name=gateway-{{username}}
#SBATCH --partition={{queue}}
#SBATCH --time={{runtime}}
#SBATCH --cpus-per-task={{nprocs}}
#SBATCH --mem={{mem}}
#SBATCH --export=ALL
{SHELL_EXPORTS}"
            ),
            [
                r"Submitted batch job (\d+)",
                r"(?m)^PENDING\b",
                r"(?m)^RUNNING (?P<host>\S+)",
                r"Invalid job id",
            ],
        ),
        spec(
            "condor",
            ["condor_submit", "condor_q {job_id} -af JobStatus RemoteHost", "condor_rm {job_id}"],
            "universe = vanilla
executable = /bin/sh
arguments = \"-c 'exec {cmd}'\"
environment = \"GATEWAY_URL={gateway_url} SESSION_TOKEN={session_token} PATH_PREFIX={path_prefix} PORT=0\"
request_memory = {mem}
request_cpus = {nprocs}
+JobName = \"gateway-{username}\"
getenv = true
queue
"
            .to_string(),
            [
                r"submitted to cluster (\d+)",
                r"(?m)^1 ",
                r"(?m)^2 (?:\S+@)?(?P<host>[^\s.]+)",
                r"Couldn't find",
            ],
        ),
        spec(
            "gridengine",
            ["qsub", "qstat -j {job_id}", "qdel {job_id}"],
            format!(
                "#!/bin/sh
#$ -N gateway-{{username}}
#$ -q {{queue}}
#$ -l h_rt={{runtime}}
#$ -pe smp {{nprocs}}
#$ -l h_vmem={{mem}}
#$ -V
{SHELL_EXPORTS}"
            ),
            [
                r"Your job (\d+)",
                r"job_state:\s+qw",
                r"(?s)job_state:\s+r\b.*exec_host_list\s+\d+:\s+(?P<host>[^:\s]+)",
                r"do(?:es)? not exist",
            ],
        ),
    ]
}

pub fn builtin_adapters() -> Vec<SchedulerAdapter> {
    builtin_adapter_specs()
        .into_iter()
        .map(|s| SchedulerAdapter::new(s).expect("builtin adapters are valid"))
        .collect()
}
