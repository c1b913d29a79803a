//! `knobloop` command line.
//!
//! Exit codes:
//!
//! | code | meaning                                                        |
//! |------|----------------------------------------------------------------|
//! | 0    | success                                                        |
//! | 1    | replay diverged, or a validated file is invalid                |
//! | 2    | configuration or usage error (including refused replays)       |
//! | 3    | runtime error or interrupt; the host was restored              |
//! | 4    | the host could not be fully restored                           |

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use knobloop::eval::emit_report;
use knobloop::memory::{store_run, Embedder, HashEmbedder, MemoryStore};
use knobloop::registry::Registry;
use knobloop::session::{
    load_run_record, load_trace, replay, run_session, HostBackend, ReplayOutcome, RunOptions, SessionConfig,
    SessionError, SessionOutcome,
};
use knobloop::tuner::TunerMode;

#[derive(Parser, Debug)]
#[command(name = "knobloop", version, about = "Online OS knob tuning with a dual-loop language-model controller")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Session config file (TOML)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for session output; overrides the config
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Random seed; overrides the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Host backend; overrides the config
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Run the full loop but never write to the host
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum BackendArg {
    Linux,
    Sim,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a tuning session
    Tune,
    /// Run a trim session followed by the downstream optimizer
    Trim {
        /// Downstream optimizer (hill_climb, random, noop, subprocess:<cmd>)
        #[arg(long)]
        downstream: Option<String>,
    },
    /// Re-run a finished session and compare its logs
    Replay {
        /// Session output directory
        dir: PathBuf,
    },
    /// Write report tables for one or more session directories
    Report {
        /// Session output directories
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Cross-run memory
    Memory {
        #[command(subcommand)]
        command: MemoryCommand,
    },
    /// Knob catalog
    Registry {
        #[command(subcommand)]
        command: RegistryCommand,
    },
}

#[derive(Subcommand, Debug)]
enum MemoryCommand {
    /// Store a finished session as a memory record
    Add {
        /// Session output directory
        run_dir: PathBuf,
        /// Memory directory; defaults to memory.dir from the config
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
    },
    /// Print the stored runs closest to a query
    Query {
        /// Text file holding the query
        query_file: PathBuf,
        /// Number of runs to return
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Memory directory; defaults to memory.dir from the config
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum RegistryCommand {
    /// Print the knob catalog in use
    List,
    /// Check a catalog file
    Validate {
        /// Catalog file (TOML)
        file: PathBuf,
    },
}

static INTERRUPT: OnceLock<Arc<AtomicBool>> = OnceLock::new();

extern "C" fn on_sigint(_: libc::c_int) {
    if let Some(flag) = INTERRUPT.get() {
        flag.store(true, Ordering::SeqCst);
    }
}

fn install_sigint() -> Arc<AtomicBool> {
    let flag = INTERRUPT.get_or_init(|| Arc::new(AtomicBool::new(false))).clone();
    let handler = on_sigint as extern "C" fn(libc::c_int);
    // SAFETY: the handler only touches an atomic
    unsafe {
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
        libc::signal(libc::SIGTERM, handler as libc::sighandler_t);
    }
    flag
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Exit(code, msg.into()).into()
}

fn from_session(e: SessionError) -> anyhow::Error {
    exit(e.exit_code() as u8, e.to_string())
}

fn load_config(g: &Global) -> Result<SessionConfig> {
    let Some(path) = &g.config else {
        return Err(exit(2, "--config is required"));
    };
    let mut cfg = SessionConfig::load(path).map_err(from_session)?;
    if let Some(o) = &g.output {
        // relative to where the command runs, not the config
        cfg.output = Some(std::env::current_dir()?.join(o));
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(b) = g.backend {
        cfg.host.backend = match b {
            BackendArg::Linux => HostBackend::Linux,
            BackendArg::Sim => HostBackend::Sim,
        };
    }
    cfg.dry_run |= g.dry_run;
    Ok(cfg)
}

fn print_summary(out: &SessionOutcome, dir: Option<&Path>) {
    let r = &out.report;
    println!("run {} ({}, seed {}) on {}", r.run_id, r.mode, r.seed, r.workload);
    let dir_word = format!("{:?}", r.direction).to_lowercase();
    println!("  reward: {} ({dir_word})", r.metric);
    if let Some(d) = r.default_reference {
        println!("  default: {d:.4}");
    }
    for (name, phase) in [("tuning", &r.tuning), ("stable", &r.stable)] {
        if !phase.values.is_empty() {
            println!("  {name}: {} windows, mean {:.4}", phase.values.len(), phase.mean);
        }
    }
    if let Some(w) = r.converged_at {
        println!("  converged at window {w}");
    }
    if let Some(t) = &r.trim {
        println!("  trim: {} narrowed, {} frozen", t.narrowed.len(), t.frozen.len());
    }
    if r.usage.total.requests > 0 {
        let cost = r.usage.total.cost.map_or("unpriced".to_string(), |c| format!("${c:.4}"));
        println!("  model: {} requests, {cost}", r.usage.total.requests);
    }
    println!(
        "  restore: {} ({} writes)",
        if r.restoration.complete { "complete" } else { "INCOMPLETE" },
        r.restoration.writes
    );
    for w in &r.warnings {
        println!("  warning: {w}");
    }
    if let Some(e) = &r.error {
        println!("  error: {e}");
    }
    if let Some(d) = dir {
        println!("  output: {}", d.display());
    }
}

fn tune(cfg: SessionConfig) -> Result<u8> {
    let opts = RunOptions { interrupt: Some(install_sigint()), ..RunOptions::default() };
    let out = run_session(&cfg, opts).map_err(from_session)?;
    print_summary(&out, cfg.output.as_deref());
    Ok(out.exit_code() as u8)
}

fn memory_store(g: &Global, dir: Option<PathBuf>) -> Result<(PathBuf, Box<dyn Embedder>)> {
    let cfg = g.config.as_ref().map(|p| SessionConfig::load(p)).transpose().map_err(from_session)?;
    let dir = match (dir, &cfg) {
        (Some(d), _) => d,
        (None, Some(c)) => match &c.memory.dir {
            Some(d) => c.resolve(d),
            None => return Err(exit(2, "the config has no memory.dir; pass --dir")),
        },
        (None, None) => return Err(exit(2, "pass --dir or --config")),
    };
    let embedder = match &cfg {
        Some(c) => c.memory.embedder.build().map_err(from_session)?,
        None => Box::new(HashEmbedder { dim: 256 }),
    };
    Ok((dir, embedder))
}

fn run(cli: Cli) -> Result<u8> {
    let g = cli.global.clone();
    match cli.command {
        Command::Tune => tune(load_config(&g)?),
        Command::Trim { downstream } => {
            let mut cfg = load_config(&g)?;
            cfg.mode = TunerMode::TrimThenDownstream;
            if downstream.is_some() {
                cfg.downstream = downstream;
            }
            tune(cfg)
        }
        Command::Replay { dir } => match replay(&dir).map_err(from_session)? {
            ReplayOutcome::Identical => {
                println!("replay identical: {}", dir.display());
                Ok(0)
            }
            ReplayOutcome::Diverged { log, window } => {
                println!("replay diverged in {log} at window {window}");
                Ok(1)
            }
            ReplayOutcome::Refused(why) => Err(exit(2, format!("replay refused: {why}"))),
        },
        Command::Report { dirs } => {
            let traces = dirs.iter().map(|d| load_trace(d)).collect::<Result<Vec<_>, _>>().map_err(from_session)?;
            let out = g.output.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for p in emit_report(&traces, &out)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Memory { command: MemoryCommand::Add { run_dir, dir } } => {
            let (dir, embedder) = memory_store(&g, dir)?;
            let record = load_run_record(&run_dir).map_err(from_session)?;
            let id = record.run_id.clone();
            let mut store = MemoryStore::open(&dir)?;
            if store.get(&id).is_some() {
                bail!("{id} is already stored in {}", dir.display());
            }
            store_run(&mut store, embedder.as_ref(), record)?;
            println!("stored {id} in {} ({} runs)", dir.display(), store.len());
            Ok(0)
        }
        Command::Memory { command: MemoryCommand::Query { query_file, k, dir } } => {
            if k == 0 {
                return Err(exit(2, "--k must be at least 1"));
            }
            let (dir, embedder) = memory_store(&g, dir)?;
            let query = std::fs::read_to_string(&query_file).with_context(|| format!("reading {}", query_file.display()))?;
            let store = MemoryStore::open(&dir)?;
            let v = embedder.embed(&query)?;
            for (r, score) in store.query(&v, k, None) {
                println!("{score:.4}  {}  {}  {}", r.run_id, r.workload, r.summary);
            }
            Ok(0)
        }
        Command::Registry { command: RegistryCommand::List } => {
            let reg = match &g.config {
                Some(p) => SessionConfig::load(p).and_then(|c| c.load_registry()).map_err(from_session)?,
                None => Registry::builtin(),
            };
            println!("{:<32} {:<10} {:<6} {:<9} {:<40} default", "name", "subsystem", "kind", "scope", "domain");
            for k in reg.knobs() {
                println!(
                    "{:<32} {:<10} {:<6} {:<9} {:<40} {}",
                    k.name,
                    format!("{:?}", k.subsystem).to_lowercase(),
                    k.kind.label(),
                    format!("{:?}", k.scope).to_lowercase(),
                    k.domain_text(&k.declared_range()),
                    k.default
                );
            }
            Ok(0)
        }
        Command::Registry { command: RegistryCommand::Validate { file } } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            match Registry::load(&text) {
                Ok(reg) => {
                    println!("{}: {} knobs, {} rules", file.display(), reg.len(), reg.rules().len());
                    Ok(0)
                }
                Err(e) => {
                    eprintln!("{}: {e}", file.display());
                    Ok(1)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<Exit>().map_or(3, |x| x.0))
        }
    }
}
