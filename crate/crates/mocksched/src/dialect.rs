//! Output formats of the four emulated scheduler families.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ToolOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    Torque,
    Slurm,
    Condor,
    GridEngine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tool {
    Submit,
    Status,
    Cancel,
}

impl Dialect {
    pub const ALL: [Dialect; 4] = [Dialect::Torque, Dialect::Slurm, Dialect::Condor, Dialect::GridEngine];

    pub fn name(self) -> &'static str {
        match self {
            Dialect::Torque => "torque",
            Dialect::Slurm => "slurm",
            Dialect::Condor => "condor",
            Dialect::GridEngine => "gridengine",
        }
    }

    /// Conventional executable name of `tool` in this dialect.
    pub fn tool_name(self, tool: Tool) -> &'static str {
        match (self, tool) {
            (Dialect::Torque | Dialect::GridEngine, Tool::Submit) => "qsub",
            (Dialect::Torque | Dialect::GridEngine, Tool::Status) => "qstat",
            (Dialect::Torque | Dialect::GridEngine, Tool::Cancel) => "qdel",
            (Dialect::Slurm, Tool::Submit) => "sbatch",
            (Dialect::Slurm, Tool::Status) => "squeue",
            (Dialect::Slurm, Tool::Cancel) => "scancel",
            (Dialect::Condor, Tool::Submit) => "condor_submit",
            (Dialect::Condor, Tool::Status) => "condor_q",
            (Dialect::Condor, Tool::Cancel) => "condor_rm",
        }
    }

    /// Reverse of [`Dialect::tool_name`].
    pub fn tool_for(self, program: &str) -> Option<Tool> {
        let base = program.rsplit('/').next().unwrap_or(program);
        [Tool::Submit, Tool::Status, Tool::Cancel]
            .into_iter()
            .find(|t| self.tool_name(*t) == base)
    }

    pub(crate) fn submitted(self, id: u64) -> ToolOutput {
        let stdout = match self {
            Dialect::Torque => format!("{id}.mockhost\n"),
            Dialect::Slurm => format!("Submitted batch job {id}\n"),
            Dialect::Condor => format!("Submitting job(s).\n1 job(s) submitted to cluster {id}.\n"),
            Dialect::GridEngine => format!("Your job {id} (\"gateway\") has been submitted\n"),
        };
        ToolOutput::ok(stdout)
    }

    pub(crate) fn pending(self, id: u64) -> ToolOutput {
        let stdout = match self {
            Dialect::Torque => format!("Job Id: {id}.mockhost\n    job_state = Q\n    queue = batch\n"),
            Dialect::Slurm => "PENDING n/a\n".to_string(),
            Dialect::Condor => "1 undefined\n".to_string(),
            Dialect::GridEngine => format!(
                "==============================================================\n\
                 job_number:                 {id}\n\
                 job_state:                  qw\n"
            ),
        };
        ToolOutput::ok(stdout)
    }

    pub(crate) fn running(self, id: u64, host: &str) -> ToolOutput {
        let stdout = match self {
            Dialect::Torque => format!(
                "Job Id: {id}.mockhost\n    job_state = R\n    queue = batch\n    exec_host = {host}/0\n"
            ),
            Dialect::Slurm => format!("RUNNING {host}\n"),
            Dialect::Condor => format!("2 slot1@{host}\n"),
            Dialect::GridEngine => format!(
                "==============================================================\n\
                 job_number:                 {id}\n\
                 job_state:                  r\n\
                 exec_host_list        1:    {host}:1\n"
            ),
        };
        ToolOutput::ok(stdout)
    }

    /// Status query for a job the scheduler does not (or no longer) know.
    pub(crate) fn status_not_found(self, id: &str) -> ToolOutput {
        match self {
            Dialect::Torque => ToolOutput::fail(153, format!("qstat: Unknown Job Id {id}\n")),
            Dialect::Slurm => ToolOutput::fail(1, "slurm_load_jobs error: Invalid job id specified\n".into()),
            // condor_q prints nothing and succeeds for jobs that left the queue.
            Dialect::Condor => ToolOutput::ok(String::new()),
            Dialect::GridEngine => ToolOutput::fail(1, format!("Following jobs do not exist: \n{id}\n")),
        }
    }

    pub(crate) fn cancel_not_found(self, id: &str) -> ToolOutput {
        match self {
            Dialect::Torque => ToolOutput::fail(153, format!("qdel: Unknown Job Id {id}\n")),
            Dialect::Slurm => ToolOutput::fail(
                1,
                format!("scancel: error: Kill job error on job id {id}: Invalid job id specified\n"),
            ),
            Dialect::Condor => ToolOutput::fail(
                1,
                format!("Couldn't find/remove all jobs matching constraint (ClusterId == {id})\n"),
            ),
            Dialect::GridEngine => ToolOutput::fail(1, format!("denied: job \"{id}\" does not exist\n")),
        }
    }

    pub(crate) fn cancelled(self, id: u64) -> ToolOutput {
        match self {
            Dialect::Condor => ToolOutput::ok(format!("All jobs in cluster {id} have been marked for removal\n")),
            Dialect::GridEngine => ToolOutput::ok(format!("user has registered the job {id} for deletion\n")),
            Dialect::Torque | Dialect::Slurm => ToolOutput::ok(String::new()),
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "torque" | "pbs" => Ok(Dialect::Torque),
            "slurm" => Ok(Dialect::Slurm),
            "condor" | "htcondor" => Ok(Dialect::Condor),
            "gridengine" | "sge" => Ok(Dialect::GridEngine),
            other => Err(format!("unknown dialect {other:?}")),
        }
    }
}

/// Turn a condor submit description into a shell script the runner can
/// execute. Only `executable`, `arguments` and `environment` matter here.
pub(crate) fn condor_description_to_script(description: &str) -> Result<String, String> {
    let mut executable = None;
    let mut arguments = Vec::new();
    let mut environment = Vec::new();
    for line in description.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        let unquoted = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        match key.as_str() {
            "executable" => executable = Some(value.to_string()),
            "arguments" => {
                arguments = shell_words::split(unquoted).map_err(|e| format!("arguments: {e}"))?;
            }
            "environment" => {
                for pair in unquoted.split_whitespace() {
                    let (k, v) = pair
                        .split_once('=')
                        .ok_or_else(|| format!("environment entry {pair:?}"))?;
                    environment.push((k.to_string(), v.to_string()));
                }
            }
            _ => {}
        }
    }
    let executable = executable.ok_or("submit description lacks executable")?;
    let mut script = String::from("#!/bin/sh\n");
    for (k, v) in environment {
        script.push_str(&format!("export {k}={}\n", shell_words::quote(&v)));
    }
    let mut argv = vec![executable];
    argv.extend(arguments);
    script.push_str("exec ");
    script.push_str(&shell_words::join(argv));
    script.push('\n');
    Ok(script)
}
