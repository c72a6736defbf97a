#![allow(dead_code)]

pub mod fuzz;
pub mod grid;
pub mod transparency;

use std::io;
use std::sync::Arc;

use gate_core::batch::{CommandOutput, CommandRunner, SchedulerAdapter, TemplateVars};
use gate_core::spawner::{SpawnRequest, SpawnerRegistry};
use mocksched::{Dialect, MockScheduler};
use tempfile::TempDir;

/// Routes scheduler tool invocations straight into a mock scheduler,
/// without spawning processes.
#[derive(Debug, Clone)]
pub struct MockRunner {
    pub sched: MockScheduler,
    pub dialect: Dialect,
}

impl CommandRunner for MockRunner {
    fn run(&self, argv: &[String], stdin: Option<&str>) -> io::Result<CommandOutput> {
        let tool = self.dialect.tool_for(&argv[0]).ok_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, format!("{}: command not found", argv[0]))
        })?;
        let out = self.sched.run_tool(self.dialect, tool, &argv[1..], stdin.unwrap_or(""));
        Ok(CommandOutput {
            code: Some(out.code),
            stdout: out.stdout,
            stderr: out.stderr,
        })
    }
}

pub fn dialect_of(adapter: &SchedulerAdapter) -> Dialect {
    adapter.name().parse().expect("builtin adapter names are dialects")
}

/// A frozen-clock mock scheduler in a fresh directory, marked online.
pub fn frozen_sched() -> (TempDir, MockScheduler) {
    let dir = tempfile::tempdir().unwrap();
    let sched = MockScheduler::open(dir.path().join("sched")).unwrap();
    sched.mark_online().unwrap();
    sched.freeze().unwrap();
    (dir, sched)
}

pub fn request(user: &str) -> SpawnRequest {
    SpawnRequest::new(
        user.parse().unwrap(),
        "http://127.0.0.1:8000",
        "0123456789abcdef0123456789abcdef",
        &format!("/user/{user}"),
    )
}

/// A registry with the `local` kind and a `batch` kind backed by `runner`.
pub fn registry(runner: Arc<dyn CommandRunner>) -> Arc<SpawnerRegistry> {
    let mut reg = SpawnerRegistry::new();
    gate_core::spawner::register_local(&mut reg);
    gate_core::batch::register_batch(
        &mut reg,
        gate_core::batch::builtin_adapters(),
        runner,
        TemplateVars::new(),
        None,
    );
    Arc::new(reg)
}

/// Independent POSIX-style word splitter used as the tokenization oracle.
///
/// Handles blanks, single quotes, double quotes (with `\` escaping `"`,
/// `\`, `$` and `` ` ``) and bare backslashes. Returns `None` for input a
/// shell would reject (unterminated quote, trailing backslash).
pub fn oracle_split(input: &str) -> Option<Vec<String>> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    let mut chars = input.chars();
    while let Some(c) = chars.next() {
        match c {
            ' ' | '\t' | '\n' => {
                if in_word {
                    words.push(std::mem::take(&mut cur));
                    in_word = false;
                }
            }
            '\'' => {
                in_word = true;
                loop {
                    match chars.next()? {
                        '\'' => break,
                        ch => cur.push(ch),
                    }
                }
            }
            '"' => {
                in_word = true;
                loop {
                    match chars.next()? {
                        '"' => break,
                        '\\' => match chars.next()? {
                            ch @ ('"' | '\\' | '$' | '`') => cur.push(ch),
                            '\n' => {}
                            ch => {
                                cur.push('\\');
                                cur.push(ch);
                            }
                        },
                        ch => cur.push(ch),
                    }
                }
            }
            '\\' => {
                in_word = true;
                match chars.next()? {
                    '\n' => {}
                    ch => cur.push(ch),
                }
            }
            ch => {
                in_word = true;
                cur.push(ch);
            }
        }
    }
    if in_word {
        words.push(cur);
    }
    Some(words)
}
