use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::{
    parse_state_field, SpawnError, SpawnRequest, Spawner, SpawnerRegistry, SpawnerStateMap,
    ENV_ADVERTISE_HOST, ENV_PORT,
};
use crate::model::{ConfigMap, ExecutionStatus};

pub const LOCAL_KIND: &str = "local";

/// Register the `local` kind, configured by [`LocalSpawnerConfig::from_config`].
pub fn register_local(registry: &mut SpawnerRegistry) {
    registry.register(LOCAL_KIND, |config| {
        Ok(Box::new(LocalSpawner::new(LocalSpawnerConfig::from_config(config)?)))
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSpawnerConfig {
    /// Argument vector of the user server command.
    pub cmd: Vec<String>,
    /// Address the gateway uses to reach servers started on this machine.
    pub host: String,
    pub stop_grace: Duration,
}

impl LocalSpawnerConfig {
    pub fn new(cmd: Vec<String>) -> Self {
        LocalSpawnerConfig {
            cmd,
            host: "127.0.0.1".to_string(),
            stop_grace: Duration::from_secs(5),
        }
    }

    /// Read `cmd`, `host` and `stop_grace` from a profile config map.
    pub fn from_config(config: &ConfigMap) -> Result<Self, SpawnError> {
        let cmd = config
            .get("cmd")
            .ok_or_else(|| SpawnError::InvalidConfig("local spawner needs `cmd`".into()))?;
        let cmd = shell_words::split(&cmd.to_string())
            .map_err(|e| SpawnError::InvalidConfig(format!("cmd: {e}")))?;
        if cmd.is_empty() {
            return Err(SpawnError::InvalidConfig("cmd is empty".into()));
        }
        let mut out = LocalSpawnerConfig::new(cmd);
        if let Some(host) = config.get("host") {
            out.host = host.to_string();
        }
        if let Some(grace) = config.get("stop_grace") {
            let secs: f64 = grace
                .to_string()
                .parse()
                .map_err(|_| SpawnError::InvalidConfig(format!("stop_grace: {grace}")))?;
            out.stop_grace = Duration::from_secs_f64(secs);
        }
        Ok(out)
    }
}

#[derive(Debug)]
struct Launched {
    pid: i32,
    /// Present when this instance launched the process itself.
    child: Option<Child>,
    port: Option<u16>,
    exit: Option<Option<i32>>,
    stopped: bool,
}

/// Runs the user server as a child process of the hub.
#[derive(Debug)]
pub struct LocalSpawner {
    config: LocalSpawnerConfig,
    launched: Option<Launched>,
}

impl LocalSpawner {
    pub fn new(config: LocalSpawnerConfig) -> Self {
        LocalSpawner {
            config,
            launched: None,
        }
    }

    pub fn pid(&self) -> Option<i32> {
        self.launched.as_ref().map(|l| l.pid)
    }
}

fn exit_code(status: ExitStatus) -> i32 {
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

/// Liveness of a process we did not launch (or whose handle was lost).
/// Zombies count as dead.
pub(crate) fn pid_alive(pid: i32) -> bool {
    if pid <= 0 {
        return false;
    }
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            // The state letter follows the parenthesised command name.
            let state = stat
                .rfind(')')
                .and_then(|i| stat[i + 1..].split_whitespace().next());
            !matches!(state, Some("Z") | Some("X"))
        }
        Err(_) => unsafe { libc::kill(pid, 0) == 0 },
    }
}

fn signal_group(pid: i32, signal: i32) {
    // Children are started as group leaders, so the group id is the pid.
    unsafe {
        if libc::kill(-pid, signal) != 0 {
            libc::kill(pid, signal);
        }
    }
}

impl Launched {
    fn refresh(&mut self) {
        if self.exit.is_some() {
            return;
        }
        match self.child.as_mut() {
            Some(child) => match child.try_wait() {
                Ok(Some(status)) => self.exit = Some(Some(exit_code(status))),
                Ok(None) => {}
                Err(e) => {
                    warn!("try_wait on pid {} failed: {e}", self.pid);
                    self.exit = Some(None);
                }
            },
            None => {
                if !pid_alive(self.pid) {
                    self.exit = Some(None);
                }
            }
        }
    }
}

impl Spawner for LocalSpawner {
    fn kind(&self) -> &str {
        LOCAL_KIND
    }

    fn start(&mut self, request: &SpawnRequest) -> Result<(), SpawnError> {
        if let Some(l) = self.launched.as_mut() {
            l.refresh();
            if l.exit.is_none() && !l.stopped {
                return Err(SpawnError::AlreadyRunning);
            }
        }
        let (program, args) = self.config.cmd.split_first().expect("validated non-empty");
        let mut cmd = Command::new(program);
        cmd.args(args)
            .envs(&request.environment)
            .env(ENV_PORT, "0")
            .env(ENV_ADVERTISE_HOST, &self.config.host)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .process_group(0);
        let child = cmd
            .spawn()
            .map_err(|e| SpawnError::StartFailed(format!("{program}: {e}")))?;
        let pid = child.id() as i32;
        debug!("local spawner started pid {pid} for {}", request.username);
        self.launched = Some(Launched {
            pid,
            child: Some(child),
            port: None,
            exit: None,
            stopped: false,
        });
        Ok(())
    }

    fn stop(&mut self) -> Result<(), SpawnError> {
        let grace = self.config.stop_grace;
        let l = match self.launched.as_mut() {
            Some(l) if !l.stopped => l,
            _ => return Err(SpawnError::NotRunning),
        };
        l.refresh();
        if l.exit.is_none() {
            signal_group(l.pid, libc::SIGTERM);
            let deadline = Instant::now() + grace;
            while Instant::now() < deadline {
                l.refresh();
                if l.exit.is_some() {
                    break;
                }
                thread::sleep(Duration::from_millis(20));
            }
            if l.exit.is_none() {
                signal_group(l.pid, libc::SIGKILL);
                if let Some(child) = l.child.as_mut() {
                    let status = child.wait().map_err(|e| SpawnError::StartFailed(e.to_string()))?;
                    l.exit = Some(Some(exit_code(status)));
                } else {
                    while pid_alive(l.pid) {
                        thread::sleep(Duration::from_millis(20));
                    }
                    l.exit = Some(None);
                }
            }
        }
        l.stopped = true;
        Ok(())
    }

    fn poll(&mut self) -> Result<ExecutionStatus, SpawnError> {
        let host = self.config.host.clone();
        let Some(l) = self.launched.as_mut() else {
            return Ok(ExecutionStatus::Unknown);
        };
        l.refresh();
        Ok(match l.exit {
            Some(code) => ExecutionStatus::Exited { code },
            None => ExecutionStatus::running(host, l.port),
        })
    }

    fn record_address(&mut self, _host: &str, port: u16) {
        if let Some(l) = self.launched.as_mut() {
            l.port = Some(port);
        }
    }

    fn get_state(&self) -> SpawnerStateMap {
        let mut map = SpawnerStateMap::new();
        if let Some(l) = &self.launched {
            map.insert("pid".into(), l.pid.to_string());
            if let Some(port) = l.port {
                map.insert("port".into(), port.to_string());
            }
            if l.stopped {
                map.insert("stopped".into(), "true".into());
            }
            if let Some(Some(code)) = l.exit {
                map.insert("exit_code".into(), code.to_string());
            }
        }
        map
    }

    fn load_state(&mut self, state: &SpawnerStateMap) -> Result<(), SpawnError> {
        let pid: i32 = parse_state_field(state, "pid")?
            .ok_or_else(|| SpawnError::MalformedState("missing pid".into()))?;
        let port = parse_state_field(state, "port")?;
        let stopped = parse_state_field(state, "stopped")?.unwrap_or(false);
        let exit = parse_state_field::<i32>(state, "exit_code")?.map(Some);
        self.launched = Some(Launched {
            pid,
            child: None,
            port,
            exit: exit.or(if stopped { Some(None) } else { None }),
            stopped,
        });
        Ok(())
    }
}
