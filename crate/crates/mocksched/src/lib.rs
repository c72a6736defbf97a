//! A deterministic stand-in batch scheduler.
//!
//! All state lives in one JSON registry under a directory (`MOCK_SCHED_DIR`),
//! guarded by an exclusive file lock, so the short-lived submit/status/cancel
//! tools and the long-running job runner see a single scheduler. Job ids are
//! sequential from 1000 and hosts are handed out round-robin as
//! `mocknode1..N`. Jobs wait `pending_delay` seconds on the scheduler clock,
//! which can be frozen and advanced by hand.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod cli;
mod dialect;

pub use dialect::{Dialect, Tool};

pub const DIR_ENV: &str = "MOCK_SCHED_DIR";
pub const FIRST_JOB_ID: u64 = 1000;
const REGISTRY_FILE: &str = "registry.json";
const LOCK_FILE: &str = "registry.lock";
const PID_FILE: &str = "daemon.pid";
const UNREACHABLE: &str = "mock-sched: cannot connect to scheduler daemon\n";

#[derive(Debug, Error)]
pub enum MockError {
    #[error("clock is in realtime mode; freeze it before advancing")]
    AdvanceInRealtime,
    #[error("{DIR_ENV} is not set")]
    NoDirectory,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Result of one tool invocation, as a process would report it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl ToolOutput {
    pub(crate) fn ok(stdout: String) -> Self {
        ToolOutput {
            code: 0,
            stdout,
            stderr: String::new(),
        }
    }

    pub(crate) fn fail(code: i32, stderr: String) -> Self {
        ToolOutput {
            code,
            stdout: String::new(),
            stderr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobState {
    /// Queued
    Q,
    /// Running
    R,
    /// Canceled
    C,
    /// Exited
    E,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockJob {
    pub job_id: String,
    pub dialect: Dialect,
    pub script_path: PathBuf,
    pub state: JobState,
    pub assigned_host: String,
    pub pending_delay: f64,
    pub submitted_at: f64,
    #[serde(default)]
    pub pid: Option<i32>,
    #[serde(default)]
    pub exit_code: Option<i32>,
}

impl MockJob {
    fn id(&self) -> u64 {
        self.job_id.parse().expect("numeric job id")
    }

    fn due(&self, now: f64) -> bool {
        now >= self.submitted_at + self.pending_delay
    }

    /// State as reported to status tools. A queued job whose delay has
    /// elapsed is running from the scheduler's point of view even if the
    /// runner has not launched its script yet.
    pub fn effective_state(&self, now: f64) -> JobState {
        match self.state {
            JobState::Q if self.due(now) => JobState::R,
            s => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Clock {
    Realtime,
    Frozen { now: f64 },
}

fn wall_clock() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl Clock {
    pub fn now(&self) -> f64 {
        match self {
            Clock::Realtime => wall_clock(),
            Clock::Frozen { now } => *now,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub next_id: u64,
    pub next_node: u32,
    pub nodes: u32,
    pub default_delay: f64,
    pub clock: Clock,
    pub jobs: BTreeMap<u64, MockJob>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry {
            next_id: FIRST_JOB_ID,
            next_node: 0,
            nodes: 4,
            default_delay: 0.0,
            clock: Clock::Realtime,
            jobs: BTreeMap::new(),
        }
    }
}

/// Extract the numeric job id from tool arguments: the last argument that
/// looks like `1000` or `1000.host`.
fn job_id_arg(args: &[String]) -> Option<(String, Option<u64>)> {
    let arg = args.iter().rev().find(|a| a.chars().next().is_some_and(|c| c.is_ascii_digit()))?;
    let numeric = arg.split('.').next().and_then(|n| n.parse().ok());
    Some((arg.clone(), numeric))
}

/// Handle on a scheduler directory.
#[derive(Debug, Clone)]
pub struct MockScheduler {
    dir: PathBuf,
}

impl MockScheduler {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("jobs"))?;
        let sched = MockScheduler { dir };
        if !sched.dir.join(REGISTRY_FILE).exists() {
            sched.with_registry(|_| ())?;
        }
        Ok(sched)
    }

    pub fn from_env() -> Result<Self, MockError> {
        let dir = std::env::var_os(DIR_ENV).ok_or(MockError::NoDirectory)?;
        Ok(MockScheduler::open(PathBuf::from(dir))?)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> io::Result<File> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.dir.join(LOCK_FILE))?;
        file.lock()?;
        Ok(file)
    }

    fn load(&self) -> io::Result<Registry> {
        match fs::read(self.dir.join(REGISTRY_FILE)) {
            Ok(bytes) if bytes.is_empty() => Ok(Registry::default()),
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Registry::default()),
            Err(e) => Err(e),
        }
    }

    fn save(&self, reg: &Registry) -> io::Result<()> {
        let tmp = self.dir.join(format!("{REGISTRY_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(reg).expect("registry serializes"))?;
        fs::rename(tmp, self.dir.join(REGISTRY_FILE))
    }

    /// Run `f` on the registry under the exclusive lock and persist the result.
    pub fn with_registry<T>(&self, f: impl FnOnce(&mut Registry) -> T) -> io::Result<T> {
        let _guard = self.lock()?;
        let mut reg = self.load()?;
        let out = f(&mut reg);
        self.save(&reg)?;
        Ok(out)
    }

    pub fn registry(&self) -> io::Result<Registry> {
        let _guard = self.lock()?;
        self.load()
    }

    pub fn job(&self, id: u64) -> io::Result<Option<MockJob>> {
        Ok(self.registry()?.jobs.get(&id).cloned())
    }

    pub fn now(&self) -> io::Result<f64> {
        Ok(self.registry()?.clock.now())
    }

    pub fn daemon_alive(&self) -> bool {
        let Ok(raw) = fs::read_to_string(self.dir.join(PID_FILE)) else {
            return false;
        };
        match raw.trim().parse::<i32>() {
            Ok(pid) if pid > 0 => unsafe { libc::kill(pid, 0) == 0 },
            _ => false,
        }
    }

    /// Declare this process as the running daemon.
    pub fn mark_online(&self) -> io::Result<()> {
        fs::write(self.dir.join(PID_FILE), std::process::id().to_string())
    }

    pub fn mark_offline(&self) -> io::Result<()> {
        match fs::remove_file(self.dir.join(PID_FILE)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    pub fn freeze(&self) -> io::Result<()> {
        self.with_registry(|reg| {
            if reg.clock == Clock::Realtime {
                reg.clock = Clock::Frozen { now: wall_clock() };
            }
        })
    }

    pub fn realtime(&self) -> io::Result<()> {
        self.with_registry(|reg| reg.clock = Clock::Realtime)
    }

    pub fn advance(&self, seconds: f64) -> Result<(), MockError> {
        self.with_registry(|reg| match &mut reg.clock {
            Clock::Realtime => Err(MockError::AdvanceInRealtime),
            Clock::Frozen { now } => {
                *now += seconds;
                Ok(())
            }
        })?
    }

    pub fn set_delay(&self, seconds: f64) -> io::Result<()> {
        self.with_registry(|reg| reg.default_delay = seconds.max(0.0))
    }

    pub fn set_nodes(&self, nodes: u32) -> io::Result<()> {
        self.with_registry(|reg| reg.nodes = nodes.max(1))
    }

    /// Dispatch one tool invocation.
    pub fn run_tool(&self, dialect: Dialect, tool: Tool, args: &[String], stdin: &str) -> ToolOutput {
        if !self.daemon_alive() {
            return ToolOutput::fail(1, UNREACHABLE.to_string());
        }
        let result = match tool {
            Tool::Submit => self.submit(dialect, stdin),
            Tool::Status => self.status(dialect, args),
            Tool::Cancel => self.cancel(dialect, args),
        };
        result.unwrap_or_else(|e| ToolOutput::fail(2, format!("mock-sched: {e}\n")))
    }

    pub fn submit(&self, dialect: Dialect, script: &str) -> io::Result<ToolOutput> {
        let body = match dialect {
            Dialect::Condor => match dialect::condor_description_to_script(script) {
                Ok(s) => s,
                Err(e) => return Ok(ToolOutput::fail(1, format!("ERROR: {e}\n"))),
            },
            _ => script.to_string(),
        };
        let id = self.with_registry(|reg| -> io::Result<u64> {
            let id = reg.next_id;
            reg.next_id += 1;
            let node = reg.next_node % reg.nodes + 1;
            reg.next_node = reg.next_node.wrapping_add(1);
            let script_path = self.dir.join("jobs").join(format!("{id}.sh"));
            fs::write(&script_path, &body)?;
            fs::set_permissions(&script_path, fs::Permissions::from_mode(0o600))?;
            reg.jobs.insert(
                id,
                MockJob {
                    job_id: id.to_string(),
                    dialect,
                    script_path,
                    state: JobState::Q,
                    assigned_host: format!("mocknode{node}"),
                    pending_delay: reg.default_delay,
                    submitted_at: reg.clock.now(),
                    pid: None,
                    exit_code: None,
                },
            );
            Ok(id)
        })??;
        debug!("mock job {id} submitted ({dialect})");
        Ok(dialect.submitted(id))
    }

    pub fn status(&self, dialect: Dialect, args: &[String]) -> io::Result<ToolOutput> {
        let Some((raw, numeric)) = job_id_arg(args) else {
            return Ok(ToolOutput::fail(2, "usage: status JOBID\n".into()));
        };
        let reg = self.registry()?;
        let now = reg.clock.now();
        let job = numeric.and_then(|id| reg.jobs.get(&id));
        Ok(match job.map(|j| (j, j.effective_state(now))) {
            Some((j, JobState::Q)) => dialect.pending(j.id()),
            Some((j, JobState::R)) => dialect.running(j.id(), &j.assigned_host),
            _ => dialect.status_not_found(&raw),
        })
    }

    pub fn cancel(&self, dialect: Dialect, args: &[String]) -> io::Result<ToolOutput> {
        let Some((raw, numeric)) = job_id_arg(args) else {
            return Ok(ToolOutput::fail(2, "usage: cancel JOBID\n".into()));
        };
        self.with_registry(|reg| {
            let Some(job) = numeric.and_then(|id| reg.jobs.get_mut(&id)) else {
                return dialect.cancel_not_found(&raw);
            };
            if matches!(job.state, JobState::Q | JobState::R) {
                if let Some(pid) = job.pid {
                    kill_group(pid, libc::SIGKILL);
                }
                job.state = JobState::C;
            }
            dialect.cancelled(job.id())
        })
    }
}

fn kill_group(pid: i32, signal: i32) {
    unsafe {
        if libc::kill(-pid, signal) != 0 {
            libc::kill(pid, signal);
        }
    }
}

fn pid_alive(pid: i32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            let state = stat.rfind(')').and_then(|i| stat[i + 1..].split_whitespace().next());
            !matches!(state, Some("Z") | Some("X"))
        }
        Err(_) => false,
    }
}

/// Executes job scripts once their pending delay has elapsed and records
/// their exit.
#[derive(Debug)]
pub struct Runner {
    sched: MockScheduler,
    children: HashMap<u64, Child>,
}

impl Runner {
    pub fn new(sched: MockScheduler) -> Self {
        Runner {
            sched,
            children: HashMap::new(),
        }
    }

    fn launch(&self, job: &MockJob) -> io::Result<Child> {
        let log = File::create(self.sched.dir.join("jobs").join(format!("{}.log", job.job_id)))?;
        Command::new("/bin/sh")
            .arg(&job.script_path)
            .current_dir(&self.sched.dir)
            .env("HOSTNAME", &job.assigned_host)
            .env("MOCK_JOB_ID", &job.job_id)
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .process_group(0)
            .spawn()
    }

    /// One scheduling pass.
    pub fn tick(&mut self) -> io::Result<()> {
        let mut launched = Vec::new();
        let mut finished = Vec::new();
        // Reap outside the lock first so exits are recorded promptly.
        for (id, child) in self.children.iter_mut() {
            if let Some(status) = child.try_wait()? {
                let code = status.code().or_else(|| status.signal().map(|s| 128 + s));
                finished.push((*id, code));
            }
        }
        for (id, _) in &finished {
            self.children.remove(id);
        }
        let children = &self.children;
        self.sched.with_registry(|reg| {
            let now = reg.clock.now();
            for (id, code) in &finished {
                if let Some(job) = reg.jobs.get_mut(id) {
                    if job.state == JobState::R {
                        job.state = JobState::E;
                        job.exit_code = *code;
                    }
                }
            }
            for (id, job) in reg.jobs.iter_mut() {
                match job.state {
                    JobState::Q if job.due(now) => match self.launch(job) {
                        Ok(child) => {
                            job.pid = Some(child.id() as i32);
                            job.state = JobState::R;
                            launched.push((*id, child));
                        }
                        Err(e) => {
                            warn!("mock job {id} failed to launch: {e}");
                            job.state = JobState::E;
                            job.exit_code = Some(127);
                        }
                    },
                    JobState::R if !children.contains_key(id) => {
                        // Launched by another runner instance.
                        if !job.pid.is_some_and(pid_alive) {
                            job.state = JobState::E;
                        }
                    }
                    _ => {}
                }
            }
        })?;
        self.children.extend(launched);
        Ok(())
    }

    /// Kill every job script this runner started.
    pub fn kill_all(&mut self) {
        for (_, mut child) in self.children.drain() {
            kill_group(child.id() as i32, libc::SIGKILL);
            let _ = child.wait();
        }
    }
}

/// Daemon loop: claims the pid file and ticks until `stop` is set.
pub fn run_daemon(sched: MockScheduler, interval: Duration, stop: &AtomicBool) -> io::Result<()> {
    sched.mark_online()?;
    let mut runner = Runner::new(sched.clone());
    while !stop.load(Ordering::Relaxed) {
        if let Err(e) = runner.tick() {
            warn!("tick failed: {e}");
        }
        thread::sleep(interval);
    }
    runner.kill_all();
    sched.mark_offline()
}

/// A runner on a background thread of the current process, for tests and
/// embedding. Dropping it stops the thread, kills its jobs and takes the
/// scheduler offline.
pub struct RunnerThread {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<io::Result<()>>>,
}

impl RunnerThread {
    pub fn spawn(sched: MockScheduler, interval: Duration) -> io::Result<Self> {
        sched.mark_online()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::spawn(move || run_daemon(sched, interval, &flag));
        Ok(RunnerThread {
            stop,
            handle: Some(handle),
        })
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.finish()
    }

    fn finish(&mut self) -> io::Result<()> {
        self.stop.store(true, Ordering::Relaxed);
        match self.handle.take() {
            Some(h) => h.join().unwrap_or_else(|_| Err(io::Error::other("runner thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for RunnerThread {
    fn drop(&mut self) {
        let _ = self.finish();
    }
}

/// Write per-dialect wrapper scripts (`qsub`, `sbatch`, ...) into `shim_dir`
/// that exec the mock tools in `tool_dir` with the right `--dialect`.
pub fn install_shims(
    dialect: Dialect,
    shim_dir: &Path,
    tool_dir: &Path,
    sched_dir: Option<&Path>,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(shim_dir)?;
    let mut written = Vec::new();
    for (tool, mock) in [(Tool::Submit, "msub"), (Tool::Status, "mstat"), (Tool::Cancel, "mdel")] {
        let path = shim_dir.join(dialect.tool_name(tool));
        let mut f = File::create(&path)?;
        writeln!(f, "#!/bin/sh")?;
        if let Some(dir) = sched_dir {
            let quoted = shell_words::quote(&dir.to_string_lossy()).into_owned();
            writeln!(f, "{DIR_ENV}={quoted}; export {DIR_ENV}")?;
        }
        let exe = shell_words::quote(&tool_dir.join(mock).to_string_lossy()).into_owned();
        writeln!(f, "exec {exe} --dialect {} \"$@\"", dialect.name())?;
        fs::set_permissions(&path, fs::Permissions::from_mode(0o755))?;
        written.push(path);
    }
    Ok(written)
}
