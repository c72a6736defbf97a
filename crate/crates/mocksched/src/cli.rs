//! Entry points of the `msub`, `mstat`, `mdel` and `mock-sched` executables.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Parser, Subcommand};

use crate::{install_shims, run_daemon, Dialect, MockScheduler, Tool};

/// Guess the dialect from the program name when no `--dialect` is given.
fn dialect_from_program(program: &str) -> Dialect {
    [Dialect::Slurm, Dialect::Condor, Dialect::Torque]
        .into_iter()
        .find(|d| [Tool::Submit, Tool::Status, Tool::Cancel].iter().any(|t| d.tool_for(program) == Some(*t)))
        .unwrap_or(Dialect::Torque)
}

/// Run a scheduler tool with raw process arguments; returns the exit code.
///
/// Scheduler tools accept many flags the mock ignores, so only `--dialect`
/// is parsed here; everything else is handed to the tool.
pub fn tool_main(tool: Tool, argv: Vec<String>) -> i32 {
    let program = argv.first().cloned().unwrap_or_default();
    let mut dialect = None;
    let mut rest = Vec::new();
    let mut iter = argv.into_iter().skip(1);
    while let Some(arg) = iter.next() {
        if let Some(value) = arg.strip_prefix("--dialect=") {
            dialect = Some(value.to_string());
        } else if arg == "--dialect" {
            dialect = iter.next();
        } else {
            rest.push(arg);
        }
    }
    let dialect = match dialect.map(|d| d.parse::<Dialect>()) {
        Some(Ok(d)) => d,
        Some(Err(e)) => {
            eprintln!("mock-sched: {e}");
            return 2;
        }
        None => dialect_from_program(&program),
    };
    let sched = match MockScheduler::from_env() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("mock-sched: {e}");
            return 1;
        }
    };
    let mut stdin = String::new();
    if tool == Tool::Submit {
        if let Some(path) = rest.iter().rev().find(|a| !a.starts_with('-')) {
            match std::fs::read_to_string(path) {
                Ok(s) => stdin = s,
                Err(e) => {
                    eprintln!("mock-sched: {path}: {e}");
                    return 1;
                }
            }
        } else if let Err(e) = std::io::stdin().read_to_string(&mut stdin) {
            eprintln!("mock-sched: reading script: {e}");
            return 1;
        }
    }
    let out = sched.run_tool(dialect, tool, &rest, &stdin);
    print!("{}", out.stdout);
    eprint!("{}", out.stderr);
    out.code
}

#[derive(Debug, Parser)]
#[command(name = "mock-sched", about = "Deterministic mock batch scheduler")]
struct Args {
    /// Scheduler state directory (defaults to $MOCK_SCHED_DIR).
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the job runner daemon (the default).
    Run {
        #[arg(long, default_value_t = 50)]
        interval_ms: u64,
    },
    /// Control the scheduler clock and settings.
    Ctl {
        #[command(subcommand)]
        action: Ctl,
    },
    /// Write dialect wrapper scripts (qsub, sbatch, ...) into a directory.
    InstallShims {
        #[arg(long)]
        dialect: Dialect,
        #[arg(long = "shim-dir")]
        shim_dir: PathBuf,
        /// Directory holding msub/mstat/mdel; defaults to this executable's.
        #[arg(long)]
        tool_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum Ctl {
    Freeze,
    Realtime,
    Advance { seconds: f64 },
    Delay { seconds: f64 },
    Nodes { count: u32 },
    /// Print the registry as JSON.
    Show,
}

impl clap::ValueEnum for Dialect {
    fn value_variants<'a>() -> &'a [Self] {
        &Dialect::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

pub fn mock_sched_main() -> i32 {
    let args = Args::parse();
    let sched = match args.dir {
        Some(dir) => MockScheduler::open(dir).map_err(crate::MockError::from),
        None => MockScheduler::from_env(),
    };
    let sched = match sched {
        Ok(s) => s,
        Err(e) => {
            eprintln!("mock-sched: {e}");
            return 1;
        }
    };
    let result: Result<(), Box<dyn std::error::Error>> = match args.command.unwrap_or(Cmd::Run { interval_ms: 50 }) {
        Cmd::Run { interval_ms } => {
            static STOP: AtomicBool = AtomicBool::new(false);
            unsafe {
                libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
                libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
            }
            extern "C" fn on_signal(_: libc::c_int) {
                STOP.store(true, std::sync::atomic::Ordering::Relaxed);
            }
            run_daemon(sched, Duration::from_millis(interval_ms), &STOP).map_err(Into::into)
        }
        Cmd::Ctl { action } => match action {
            Ctl::Freeze => sched.freeze().map_err(Into::into),
            Ctl::Realtime => sched.realtime().map_err(Into::into),
            Ctl::Advance { seconds } => sched.advance(seconds).map_err(Into::into),
            Ctl::Delay { seconds } => sched.set_delay(seconds).map_err(Into::into),
            Ctl::Nodes { count } => sched.set_nodes(count).map_err(Into::into),
            Ctl::Show => sched.registry().map_err(Into::into).map(|reg| {
                let text = serde_json::to_string_pretty(&reg).expect("registry serializes");
                let _ = writeln!(std::io::stdout(), "{text}");
            }),
        },
        Cmd::InstallShims {
            dialect,
            shim_dir,
            tool_dir,
        } => {
            let tool_dir = tool_dir.or_else(|| {
                std::env::current_exe()
                    .ok()
                    .and_then(|p| p.parent().map(PathBuf::from))
            });
            match tool_dir {
                Some(tool_dir) => install_shims(dialect, &shim_dir, &tool_dir, Some(sched.dir()))
                    .map(|paths| {
                        for p in paths {
                            println!("{}", p.display());
                        }
                    })
                    .map_err(Into::into),
                None => Err("cannot locate msub/mstat/mdel; pass --tool-dir".into()),
            }
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mock-sched: {e}");
            1
        }
    }
}
