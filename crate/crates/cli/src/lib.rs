//! Operator commands over checkpoints: inspect, validate, reshard, bench, gc.
//!
//! Every command builds a report; `--json` prints it as JSON, otherwise a
//! table derived from the same report is printed. Exit codes: 0 success,
//! 1 operation error (or failed validation), 2 usage error or missing input.

mod bench;
mod config;
mod gc;
mod inspect;
mod reshard;
mod util;
mod validate;

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use ckpt_core::coordination::{CrashPoint, Mode, Runtime, RuntimeConfig};
use ckpt_core::storage::Storage;
use ckpt_core::Error;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use bench::{BenchReport, LoadRun, ModelLeaf, Phase, SaveRun};
pub use gc::GcReport;
pub use inspect::{InspectReport, LeafRow};
pub use reshard::ReshardReport;
pub use validate::{validate_checkpoint, ValidateReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ckpt", version, about = "Inspect, validate, reshard and benchmark checkpoints")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Storage backend: `fs:<dir>` or `mem`.
    #[arg(long, global = true, default_value = "fs:.")]
    pub backend: String,
    /// Simulated process count.
    #[arg(long, global = true)]
    pub processes: Option<usize>,
    /// Coordination mode: `multi` or `single`.
    #[arg(long, global = true, default_value = "multi")]
    pub mode: Mode,
    /// Seed for scheduling jitter and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Crash `<process>@<sync point>`; repeatable.
    #[arg(long = "crash", global = true)]
    pub crash: Vec<CrashPoint>,
    /// Barrier timeout in milliseconds.
    #[arg(long, global = true)]
    pub barrier_timeout_ms: Option<u64>,
    /// JSON file whose keys mirror the long flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List leaves, shapes, dtypes, shardings and chunking (metadata only).
    Inspect { path: String },
    /// Check commit marker, index coverage, process metadata and chunk objects.
    Validate { path: String },
    /// Load a checkpoint with new shardings and save it elsewhere.
    Reshard(reshard::ReshardArgs),
    /// Seeded synthetic save/load with storage counters per strategy.
    Bench(bench::BenchArgs),
    /// Apply a retention policy and/or sweep leftovers of failed saves.
    Gc(gc::GcArgs),
    /// Print the latest finalized step under a root.
    Latest { root: String },
}

/// What a command produced: a report plus the exit code it implies.
pub struct Outcome {
    pub json: serde_json::Value,
    pub text: String,
    pub code: i32,
}

impl Outcome {
    fn new<R: Serialize>(report: &R, text: String, code: i32) -> Self {
        Self { json: serde_json::to_value(report).expect("reports serialize"), text, code }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotFound(_) | Error::NotFinalized(_) | Error::InvalidOption(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

pub fn open_backend(spec: &str) -> Result<Storage, Error> {
    match spec {
        "mem" => Ok(Storage::memory()),
        s => match s.strip_prefix("fs:") {
            Some(dir) if !dir.is_empty() => Storage::filesystem(dir),
            _ => Err(Error::InvalidOption(format!("backend {s:?} is not fs:<dir> or mem"))),
        },
    }
}

fn runtime(g: &GlobalArgs, storage: &Storage, processes: usize) -> Result<Runtime, Error> {
    let mut cfg = RuntimeConfig::new(processes, g.mode);
    cfg.seed = g.seed;
    cfg.crash_schedule = g.crash.clone();
    if let Some(ms) = g.barrier_timeout_ms {
        cfg.barrier_timeout = Duration::from_millis(ms);
    }
    Runtime::new(storage.clone(), cfg)
}

/// Runs one parsed command against `storage`.
pub fn execute(cli: &Cli, storage: &Storage) -> Result<Outcome, Error> {
    let g = &cli.global;
    match &cli.command {
        Command::Inspect { path } => inspect::run(storage, path),
        Command::Validate { path } => validate::run(storage, path),
        Command::Reshard(a) => reshard::run(g, storage, a),
        Command::Bench(a) => bench::run(g, storage, a),
        Command::Gc(a) => gc::run(g, storage, a),
        Command::Latest { root } => {
            let rt = runtime(g, storage, g.processes.unwrap_or(1))?;
            let latest = ckpt_core::training::latest_step(&rt, root)?;
            let text = latest.map_or("none".to_string(), |s| s.to_string());
            Ok(Outcome::new(&serde_json::json!({ "root": root, "latest": latest }), text, EXIT_OK))
        }
    }
}

/// Parses `args` (including the program name) and runs the command. Uses
/// `storage` instead of `--backend` when given.
pub fn run_with(args: Vec<String>, storage: Option<&Storage>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = match config::expand(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let owned;
    let storage = match storage {
        Some(s) => s,
        None => match open_backend(&cli.global.backend) {
            Ok(s) => {
                owned = s;
                &owned
            }
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                return exit_code(&e);
            }
        },
    };
    match execute(&cli, storage) {
        Ok(o) => {
            let _ = if cli.global.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&o.json).expect("json value"))
            } else {
                write!(out, "{}", o.text)
            };
            o.code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(args: Vec<String>) -> i32 {
    run_with(args, None, &mut std::io::stdout(), &mut std::io::stderr())
}
