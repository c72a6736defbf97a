//! Execution of scheduler commands as argument vectors.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CommandOutput {
    /// Exit code; `None` when terminated by a signal.
    pub code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutput {
    pub fn success(&self) -> bool {
        self.code == Some(0)
    }
}

/// Something that can execute a scheduler tool invocation.
///
/// `Err` means the tool could not be executed at all (missing binary,
/// timeout); a tool that ran and failed is an `Ok` with a nonzero code.
pub trait CommandRunner: Send + Sync {
    fn run(&self, argv: &[String], stdin: Option<&str>) -> io::Result<CommandOutput>;
}

impl<R: CommandRunner + ?Sized> CommandRunner for Arc<R> {
    fn run(&self, argv: &[String], stdin: Option<&str>) -> io::Result<CommandOutput> {
        (**self).run(argv, stdin)
    }
}

/// Runs commands as child processes, never through a shell.
#[derive(Debug, Clone)]
pub struct ProcessRunner {
    search_path: Vec<PathBuf>,
    env: BTreeMap<String, String>,
    timeout: Duration,
}

impl Default for ProcessRunner {
    fn default() -> Self {
        ProcessRunner {
            search_path: Vec::new(),
            env: BTreeMap::new(),
            timeout: Duration::from_secs(10),
        }
    }
}

impl ProcessRunner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Directories searched (before `$PATH`) for bare program names.
    pub fn search_path(mut self, dirs: Vec<PathBuf>) -> Self {
        self.search_path = dirs;
        self
    }

    pub fn env(mut self, env: BTreeMap<String, String>) -> Self {
        self.env = env;
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn resolve(&self, program: &str) -> PathBuf {
        if program.contains('/') {
            return PathBuf::from(program);
        }
        let system = std::env::var_os("PATH")
            .map(|p| std::env::split_paths(&p).collect::<Vec<_>>())
            .unwrap_or_default();
        self.search_path
            .iter()
            .chain(system.iter())
            .map(|dir| dir.join(program))
            .find(|candidate| is_executable(candidate))
            .unwrap_or_else(|| PathBuf::from(program))
    }
}

fn is_executable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    path.metadata()
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

fn drain<R: Read + Send + 'static>(mut pipe: R) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

impl CommandRunner for ProcessRunner {
    fn run(&self, argv: &[String], stdin: Option<&str>) -> io::Result<CommandOutput> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let mut child = Command::new(self.resolve(program))
            .args(args)
            .envs(&self.env)
            .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;

        if let (Some(input), Some(mut pipe)) = (stdin, child.stdin.take()) {
            // A tool that exits without reading its input is not an error here.
            let _ = pipe.write_all(input.as_bytes());
        }
        let out = drain(child.stdout.take().expect("piped"));
        let err = drain(child.stderr.take().expect("piped"));

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    format!("{program} exceeded {:?}", self.timeout),
                ));
            }
            thread::sleep(Duration::from_millis(5));
        };
        Ok(CommandOutput {
            code: status.code(),
            stdout: out.join().unwrap_or_default(),
            stderr: err.join().unwrap_or_default(),
        })
    }
}

/// Wraps a runner and records every argument vector it executes.
#[derive(Clone)]
pub struct RecordingRunner<R> {
    inner: R,
    trace: Arc<Mutex<Vec<Vec<String>>>>,
}

impl<R: CommandRunner> RecordingRunner<R> {
    pub fn new(inner: R) -> Self {
        RecordingRunner {
            inner,
            trace: Arc::default(),
        }
    }

    pub fn trace(&self) -> Vec<Vec<String>> {
        self.trace.lock().expect("trace lock").clone()
    }
}

impl<R: CommandRunner> CommandRunner for RecordingRunner<R> {
    fn run(&self, argv: &[String], stdin: Option<&str>) -> io::Result<CommandOutput> {
        self.trace.lock().expect("trace lock").push(argv.to_vec());
        self.inner.run(argv, stdin)
    }
}
