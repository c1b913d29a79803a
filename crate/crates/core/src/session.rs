//! One tuning session end to end: snapshot, first window, optional warm
//! start from cross-run memory, tuning and stable windows, restore, report.
//!
//! Restoration runs on every exit path after the snapshot: success,
//! runtime errors and interrupts alike.
//!
//! Session directory:
//!
//! ```text
//! config.toml         resolved config (paths rewritten to local copies)
//! script.jsonl        scripted-backend script, when used
//! surface.toml        sim surface, when loaded from a file
//! registry.toml       knob catalog, when not the built-in one
//! memory/             retrieved runs, so a replay sees the same prior
//! prompts/            one file per model request
//! decisions.jsonl     one record per window
//! measurements.jsonl  one record per window
//! audit.jsonl         one record per validated proposal
//! truth.jsonl         noise-free sim values, sim host only
//! report.json         summary
//! trace.csv           per-window plot data
//! per_benchmark.csv, aggregate.csv, robustness.csv, windows.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{ActuationBackend, FailurePlan, LinuxFiles, NoopBackend, SimulatedBackend};
use crate::baselines;
use crate::clock::{Clock, VirtualClock, WallClock};
use crate::context::{build_session_spec, Constraint, Goal, DEFAULT_SALIENT, DEFAULT_STRATEGY_TEXT};
use crate::eval::{emit_report, Phase, PhaseSummary, SessionTrace};
use crate::gateway::{
    account_usage, shared, Completion, Gateway, GatewayError, HttpBackend, ModelBackend, ModelEndpoint, PolicyConfig,
    Role, ScriptRecord, ScriptedBackend, SharedBackend, UsageReport,
};
use crate::guardrail::{Actuator, AuditLog, AuditRecord, SessionPolicy};
use crate::memory::{
    bootstrap_query, retrieve, store_run, synthesize_prior, Embedder, HashEmbedder, HttpEmbedder, MemoryMode,
    MemoryPrior, MemoryStore, RunRecord, TraceEntry,
};
use crate::registry::{KnobValue, Registry};
use crate::sim::{load_surface, SimHost, TruthRecord};
use crate::telemetry::StdoutSampler;
use crate::telemetry::linux::LinuxSource;
use crate::telemetry::{Collector, Direction, MeasurementRecord, Reducer, RewardChannel, TelemetrySource};
use crate::tuner::{Controller, ControllerParts, DecisionRecord, LoopConfig, PromptRecord, TrimResult, TunerMode};

type Assign = BTreeMap<String, KnobValue>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HostBackend {
    #[default]
    Sim,
    Linux,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostConfig {
    #[serde(default)]
    pub backend: HostBackend,
    /// Scenario name or surface file (sim host).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
    /// Workload output file tailed once per window (linux host).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_log: Option<PathBuf>,
    /// Application metrics reported as `name=value` lines; defaults to the
    /// reward metric.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<String>,
    #[serde(default = "default_reducer")]
    pub reducer: Reducer,
    /// Root the knob paths are resolved against (linux host).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<String>,
    /// `perf` binary used for hardware counters (linux host); a bare name
    /// is looked up on PATH.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perf: Option<String>,
}

fn default_reducer() -> Reducer {
    Reducer::Median
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            backend: HostBackend::Sim,
            surface: None,
            app_log: None,
            metrics: Vec::new(),
            reducer: Reducer::Median,
            root: None,
            machine: None,
            perf: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    None,
    Scripted,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backend: ModelKind,
    /// Line-delimited script (scripted backend).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Policy answering both roles once the script runs out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instant: Option<ModelEndpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<ModelEndpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

fn default_dim() -> usize {
    256
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash { dim: default_dim() }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>, SessionError> {
        match self {
            EmbedderConfig::Hash { dim } => Ok(Box::new(HashEmbedder { dim: *dim })),
            EmbedderConfig::Http { base_url, model, api_key_env } => Ok(Box::new(
                HttpEmbedder::new(base_url, model, api_key_env.as_deref(), 30.0)
                    .map_err(|e| SessionError::Config(format!("memory.embedder: {e}")))?,
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    #[serde(default)]
    pub mode: MemoryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Store this session's run at the end.
    #[serde(default)]
    pub record: bool,
    /// Exclude runs of the same workload from retrieval.
    #[serde(default)]
    pub hold_out: bool,
    #[serde(default)]
    pub embedder: EmbedderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: TunerMode,
    /// Optimizer after trimming.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream: Option<String>,
    /// Named set or comma-separated knob names; the sim surface's knobs
    /// when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knobs: Option<String>,
    /// Knob catalog file; the built-in catalog when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<String>,
    #[serde(default = "default_mask")]
    pub cpu_mask: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub dry_run: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salient: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<Constraint>,
    pub reward: RewardChannel,
    #[serde(default, rename = "loop")]
    pub loop_cfg: LoopConfig,
    #[serde(default)]
    pub host: HostConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_mode() -> TunerMode {
    TunerMode::Dual
}

fn default_mask() -> Vec<usize> {
    vec![0]
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("config: {0}")]
    Config(String),
    #[error("setup: {0}")]
    Setup(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl SessionError {
    pub fn exit_code(&self) -> i32 {
        match self {
            SessionError::Config(_) => 2,
            _ => 3,
        }
    }
}

impl SessionConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, SessionError> {
        let mut cfg: SessionConfig = toml::from_str(text).map_err(|e| SessionError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let text = fs::read_to_string(path).map_err(|e| SessionError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn workload_label(&self) -> String {
        self.workload.clone().or_else(|| self.host.surface.clone()).unwrap_or_else(|| "workload".into())
    }

    pub fn run_label(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("{}-{}-s{}", self.workload_label(), self.mode, self.seed).replace(':', "_"))
    }

    pub fn load_registry(&self) -> Result<Registry, SessionError> {
        match &self.registry {
            None => Ok(Registry::builtin()),
            Some(p) => {
                let path = self.resolve(p);
                let text = fs::read_to_string(&path).map_err(|e| SessionError::Config(format!("registry: {}: {e}", path.display())))?;
                Registry::load(&text).map_err(|e| SessionError::Config(format!("registry: {e}")))
            }
        }
    }

    /// Field-level checks that need no host access.
    pub fn validate(&self) -> Result<(), SessionError> {
        let c = |m: String| Err(SessionError::Config(m));
        let l = &self.loop_cfg;
        if l.window_s <= 0.0 {
            return c("loop.window_s: must be positive".into());
        }
        if l.instant_every_windows == 0 {
            return c("loop.instant_every_windows: must be at least 1".into());
        }
        if self.mode == TunerMode::TrimThenDownstream && l.tuning_windows < l.trim_windows {
            return c(format!("loop.trim_windows: {} exceeds tuning_windows {}", l.trim_windows, l.tuning_windows));
        }
        if self.cpu_mask.is_empty() {
            return c("cpu_mask: must name at least one cpu".into());
        }
        match (&self.mode, &self.model.backend) {
            (TunerMode::Baseline(_), _) => {}
            (_, ModelKind::None) => return c(format!("model.backend: mode {} needs a model backend", self.mode)),
            (mode, ModelKind::Http) => {
                if mode.uses_instant() && self.model.instant.is_none() {
                    return c(format!("model.instant: mode {mode} needs an instant endpoint"));
                }
                if mode.uses_reasoning() && self.model.reasoning.is_none() {
                    return c(format!("model.reasoning: mode {mode} needs a reasoning endpoint"));
                }
            }
            (_, ModelKind::Scripted) => {
                if self.model.script.is_none() && self.model.policy.is_none() {
                    return c("model: the scripted backend needs `script` or `policy`".into());
                }
            }
        }
        if let TunerMode::Baseline(name) = &self.mode {
            baselines::by_name(name).map_err(|e| SessionError::Config(format!("mode: {e}")))?;
        }
        if self.mode == TunerMode::TrimThenDownstream {
            let name = self.downstream.as_deref().unwrap_or("hill_climb");
            baselines::by_name(name).map_err(|e| SessionError::Config(format!("downstream: {e}")))?;
        }
        if matches!(self.mode, TunerMode::Baseline(_) | TunerMode::TrimThenDownstream)
            && self.reward == RewardChannel::SystemBundle
        {
            return c("reward: optimizers need a scalar reward channel".into());
        }
        if self.host.backend == HostBackend::Sim && self.host.surface.is_none() {
            return c("host.surface: the sim host needs a surface".into());
        }
        if (self.memory.mode != MemoryMode::Off || self.memory.record) && self.memory.dir.is_none() {
            return c("memory.dir: required when memory.mode is not off or record is set".into());
        }
        Ok(())
    }

    /// True when a replay can reproduce the session exactly.
    pub fn deterministic(&self) -> Result<(), String> {
        if self.host.backend != HostBackend::Sim {
            return Err("the session ran against a live host".into());
        }
        if self.model.backend == ModelKind::Http {
            return Err("the session used HTTP model endpoints, which are not deterministic".into());
        }
        if self.memory.mode != MemoryMode::Off && matches!(self.memory.embedder, EmbedderConfig::Http { .. }) {
            return Err("the session used an HTTP embedder".into());
        }
        Ok(())
    }
}

/// Fault injection for restoration tests.
#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// Telemetry fails when sampling this window.
    pub telemetry_at: Option<u64>,
    /// Every model request fails from this boundary on.
    pub gateway_from: Option<u64>,
    /// The next backend write after this window's measurement fails once.
    pub actuation_at: Option<u64>,
    /// Writes fail from this window's boundary on, rollbacks included.
    pub actuation_fatal_at: Option<u64>,
    /// The interrupt flag is raised before this window.
    pub interrupt_at: Option<u64>,
}

#[derive(Default)]
pub struct RunOptions {
    pub interrupt: Option<Arc<AtomicBool>>,
    pub faults: Faults,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RestoreOutcome {
    pub complete: bool,
    pub writes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residual: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub workload: String,
    pub metric: String,
    pub direction: Direction,
    pub windows: u64,
    pub tuning: PhaseSummary,
    pub stable: PhaseSummary,
    /// Reward of window 0, measured under the starting configuration.
    pub default_reference: Option<f64>,
    pub best: Option<(Assign, f64)>,
    #[serde(default)]
    pub start_config: Assign,
    pub final_config: Assign,
    pub converged_at: Option<u64>,
    pub usage: UsageReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<MemoryPrior>,
    pub restoration: RestoreOutcome,
    pub deterministic: bool,
    pub backends: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub struct SessionOutcome {
    pub report: SessionReport,
    pub decisions: Vec<DecisionRecord>,
    pub measurements: Vec<MeasurementRecord>,
    pub prompts: Vec<PromptRecord>,
    pub audit: Vec<AuditRecord>,
    pub truth: Vec<TruthRecord>,
    /// Simulated control map and its bytes at session start (sim host).
    pub sim_backend: Option<SimulatedBackend>,
    pub initial_state: Option<Vec<u8>>,
}

impl SessionOutcome {
    /// 0 success, 3 runtime error with a complete restore, 4 incomplete restore.
    pub fn exit_code(&self) -> i32 {
        if !self.report.restoration.complete {
            4
        } else if self.report.error.is_some() {
            3
        } else {
            0
        }
    }
}

/// Model backend that fails every request once its switch is on.
struct Faulty {
    inner: SharedBackend,
    tripped: Arc<AtomicBool>,
}

impl ModelBackend for Faulty {
    fn complete(&mut self, role: Role, prompt: &str, schema: &crate::context::ResponseSchema) -> Result<Completion, GatewayError> {
        if self.tripped.load(Ordering::SeqCst) {
            return Err(GatewayError::Transport("injected gateway failure".into()));
        }
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).complete(role, prompt, schema)
    }

    fn deterministic(&self) -> bool {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).deterministic()
    }

    fn kind(&self) -> &'static str {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).kind()
    }
}

fn build_gateway(cfg: &SessionConfig, registry: &Registry, trip: &Arc<AtomicBool>) -> Result<Gateway, SessionError> {
    let wrap = |b: SharedBackend| shared(Faulty { inner: b, tripped: trip.clone() });
    match cfg.model.backend {
        ModelKind::None => Ok(Gateway::new()),
        ModelKind::Scripted => {
            let mut records = Vec::new();
            if let Some(p) = &cfg.model.script {
                let path = cfg.resolve(p);
                let text = fs::read_to_string(&path).map_err(|e| SessionError::Config(format!("model.script: {}: {e}", path.display())))?;
                for (i, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let r: ScriptRecord = serde_json::from_str(line)
                        .map_err(|e| SessionError::Config(format!("model.script line {}: {e}", i + 1)))?;
                    records.push(r);
                }
            }
            if let Some(policy) = &cfg.model.policy {
                records.push(ScriptRecord::policy(crate::gateway::ScriptRole::Any, policy.clone()));
            }
            let backend = ScriptedBackend::new(records, registry, cfg.seed).map_err(|e| SessionError::Config(e.to_string()))?;
            let b = wrap(shared(backend));
            Ok(Gateway::new().with_backend(Role::Instant, b.clone()).with_backend(Role::Reasoning, b))
        }
        ModelKind::Http => {
            let mut g = Gateway::new();
            for (role, ep) in [(Role::Instant, &cfg.model.instant), (Role::Reasoning, &cfg.model.reasoning)] {
                if let Some(ep) = ep {
                    let mut ep = ep.clone();
                    ep.role = role;
                    let b = HttpBackend::new(ep).map_err(|e| SessionError::Config(format!("model.{role}: {e}")))?;
                    g = g.with_backend(role, wrap(shared(b)));
                }
            }
            Ok(g)
        }
    }
}

fn price_table(cfg: &SessionConfig) -> BTreeMap<Role, crate::gateway::Price> {
    [(Role::Instant, &cfg.model.instant), (Role::Reasoning, &cfg.model.reasoning)]
        .into_iter()
        .filter_map(|(r, ep)| ep.as_ref().and_then(|e| e.price).map(|p| (r, p)))
        .collect()
}

struct Sinks {
    dir: Option<PathBuf>,
}

impl Sinks {
    fn append(&self, name: &str, line: &str) -> std::io::Result<()> {
        if let Some(dir) = &self.dir {
            let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(name))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    fn prompts(&self, records: &[PromptRecord], seq: &mut usize) -> std::io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        for r in records {
            let at = r.window.map_or("start".to_string(), |w| format!("w{w:03}"));
            let kind = serde_json::to_value(r.request).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let name = format!("{:04}-{at}-{}-{kind}.txt", *seq, r.role);
            *seq += 1;
            fs::write(dir.join("prompts").join(name), format!("{}\n--- reply ---\n{}\n", r.prompt, r.reply))?;
        }
        Ok(())
    }
}

fn copy_into(cfg: &SessionConfig, src: &Path, dir: &Path, name: &str) -> Result<PathBuf, SessionError> {
    fs::copy(cfg.resolve(src), dir.join(name)).map_err(|e| SessionError::Setup(format!("copy {}: {e}", src.display())))?;
    Ok(PathBuf::from(name))
}

/// Writes the config copy with every referenced file copied next to it.
fn write_config_copy(cfg: &SessionConfig, dir: &Path) -> Result<(), SessionError> {
    let mut copy = cfg.clone();
    copy.output = None;
    if let Some(p) = &cfg.model.script {
        copy.model.script = Some(copy_into(cfg, p, dir, "script.jsonl")?);
    }
    if let Some(p) = &cfg.registry {
        copy.registry = Some(copy_into(cfg, p, dir, "registry.toml")?);
    }
    if let Some(s) = &cfg.host.surface {
        if crate::sim::scenario_text(s).is_none() {
            copy.host.surface = Some(copy_into(cfg, Path::new(s), dir, "surface.toml")?.display().to_string());
        }
    }
    if copy.memory.mode != MemoryMode::Off {
        copy.memory.dir = Some(PathBuf::from("memory"));
        copy.memory.record = false;
    }
    fs::write(dir.join("config.toml"), copy.to_toml())?;
    Ok(())
}

/// Runs one session. Config and setup problems before the snapshot are
/// returned as errors; anything later is reported in the outcome, after
/// restoration.
pub fn run_session(cfg: &SessionConfig, opts: RunOptions) -> Result<SessionOutcome, SessionError> {
    cfg.validate()?;
    let registry = cfg.load_registry()?;
    let mask: BTreeSet<usize> = cfg.cpu_mask.iter().copied().collect();
    let workload = cfg.workload_label();
    let faults = opts.faults.clone();

    // host
    let surface = match (&cfg.host.backend, &cfg.host.surface) {
        (HostBackend::Sim, Some(s)) => {
            let path = cfg.resolve(Path::new(s));
            let name = if crate::sim::scenario_text(s).is_some() { s.clone() } else { path.display().to_string() };
            Some(load_surface(&name, &registry).map_err(|e| SessionError::Config(format!("host.surface: {e}")))?)
        }
        _ => None,
    };
    let mut set = match (&cfg.knobs, &surface) {
        (Some(spec), _) => registry.resolve_set_spec(spec).map_err(|e| SessionError::Config(format!("knobs: {e}")))?,
        (None, Some(s)) => s.set.clone(),
        (None, None) => registry.resolve_set_spec("default").map_err(|e| SessionError::Config(format!("knobs: {e}")))?,
    };
    if let Some(s) = &surface {
        for spec in set.members() {
            if s.set.get(&spec.name).is_none() {
                return Err(SessionError::Config(format!("knobs: `{}` is not modelled by surface {}", spec.name, s.name())));
            }
        }
    }
    let _ = &mut set;

    let metric_names: Vec<String> = if cfg.host.metrics.is_empty() {
        match (&cfg.reward, &surface) {
            (RewardChannel::App { metric, .. }, _) => vec![metric.clone()],
            (_, Some(s)) => vec![s.surface.metric.clone()],
            _ => Vec::new(),
        }
    } else {
        cfg.host.metrics.clone()
    };
    let adapter: Option<Box<dyn crate::telemetry::WorkloadAdapter>> = (!metric_names.is_empty()).then(|| {
        let names: Vec<&str> = metric_names.iter().map(String::as_str).collect();
        Box::new(StdoutSampler::key_value(&names, cfg.host.reducer)) as Box<dyn crate::telemetry::WorkloadAdapter>
    });

    let mut truth_handle = None;
    let mut sim_backend = None;
    let (source, backend, clock): (Box<dyn TelemetrySource>, Arc<dyn ActuationBackend>, Arc<dyn Clock>) = match &surface {
        Some(s) => {
            let mut host = SimHost::new(&registry, s.clone(), &mask, cfg.seed);
            if let Some(w) = faults.telemetry_at {
                host = host.fail_at_window(w);
            }
            truth_handle = Some(host.truth());
            let b = host.backend();
            sim_backend = Some(b.clone());
            let actuation: Arc<dyn ActuationBackend> =
                if cfg.dry_run { Arc::new(NoopBackend::new(Box::new(b))) } else { Arc::new(b) };
            (Box::new(host), actuation, Arc::new(VirtualClock::new()))
        }
        None => {
            let root = cfg.host.root.clone().map(|r| cfg.resolve(&r)).unwrap_or_else(|| PathBuf::from("/"));
            let files = LinuxFiles::new(root);
            let actuation: Arc<dyn ActuationBackend> =
                if cfg.dry_run { Arc::new(NoopBackend::new(Box::new(files))) } else { Arc::new(files) };
            let log = cfg.host.app_log.as_ref().map(|p| cfg.resolve(p));
            let mut source = LinuxSource::new(log);
            if let Some(perf) = &cfg.host.perf {
                // bare names go through PATH, paths are config-relative
                let perf = if perf.contains('/') { cfg.resolve(Path::new(perf)).display().to_string() } else { perf.clone() };
                source = source.with_perf(&perf);
            }
            (Box::new(source), actuation, Arc::new(WallClock))
        }
    };
    let initial_state = sim_backend.as_ref().map(SimulatedBackend::state_bytes);
    let mut collector = Collector::new(source, adapter, cfg.reward.clone()).map_err(|e| SessionError::Config(format!("reward: {e}")))?;

    let trip = Arc::new(AtomicBool::new(false));
    let gateway = build_gateway(cfg, &registry, &trip)?;
    let downstream = match &cfg.mode {
        TunerMode::Baseline(name) => Some(baselines::by_name(name).map_err(|e| SessionError::Config(e.to_string()))?),
        TunerMode::TrimThenDownstream => Some(
            baselines::by_name(cfg.downstream.as_deref().unwrap_or("hill_climb"))
                .map_err(|e| SessionError::Config(e.to_string()))?,
        ),
        _ => None,
    };
    // recording alone still needs the embedder
    let embedder = match cfg.memory.mode {
        MemoryMode::Off if !cfg.memory.record => None,
        _ => Some(cfg.memory.embedder.build()?),
    };
    let store = match (&cfg.memory.mode, &cfg.memory.dir) {
        (MemoryMode::Off, _) | (_, None) => None,
        (_, Some(d)) => Some(MemoryStore::open(&cfg.resolve(d)).map_err(|e| SessionError::Setup(format!("memory: {e}")))?),
    };

    // output directory
    let sinks = Sinks { dir: cfg.output.as_ref().map(|o| cfg.resolve(o)) };
    if let Some(dir) = &sinks.dir {
        if dir.join("decisions.jsonl").exists() {
            return Err(SessionError::Setup(format!("{} already holds a session", dir.display())));
        }
        fs::create_dir_all(dir.join("prompts"))?;
        write_config_copy(cfg, dir)?;
    }
    let audit = match &sinks.dir {
        Some(dir) => AuditLog::open(&dir.join("audit.jsonl"))?,
        None => AuditLog::in_memory(),
    };

    // snapshot
    collector.setup().map_err(|e| SessionError::Setup(format!("workload adapter: {e}")))?;
    let actuator = Arc::new(Actuator::new(backend, clock.clone(), mask.clone()));
    let snapshot = match actuator.snapshot(&set) {
        Ok(s) => s,
        Err(e) => {
            collector.cleanup();
            return Err(SessionError::Setup(format!("snapshot: {e}")));
        }
    };

    let direction = cfg.reward.direction();
    let goal = Goal::from_channel(&cfg.reward, cfg.constraints.clone());
    let spec = build_session_spec(goal.clone(), &set, cfg.strategy.as_deref().unwrap_or(DEFAULT_STRATEGY_TEXT), None);
    let salient = cfg.salient.clone().unwrap_or_else(|| DEFAULT_SALIENT.iter().map(|s| s.to_string()).collect());
    let mut controller = Controller::new(
        ControllerParts {
            registry: registry.clone(),
            set: set.clone(),
            policy: SessionPolicy::default(),
            current: snapshot.config.clone(),
            actuator: actuator.clone(),
            gateway: gateway.clone(),
            clock: clock.clone(),
            spec,
            loop_cfg: cfg.loop_cfg.clone(),
            direction,
            salient,
            audit,
            seed: cfg.seed,
        },
        cfg.mode.clone(),
        downstream,
    );

    let mut decisions = Vec::new();
    let mut measurements = Vec::new();
    let mut prompts = Vec::new();
    let mut prior = None;
    let mut warnings = Vec::new();
    let mut prompt_seq = 0usize;
    let start_config = snapshot.config.assignments.clone();
    let machine = machine_label(&cfg);

    let run = (|| -> Result<(), String> {
        controller.start().map_err(|e| e.to_string())?;
        let total = cfg.loop_cfg.total_windows();
        for w in 0..total {
            if faults.interrupt_at == Some(w) {
                if let Some(flag) = &opts.interrupt {
                    flag.store(true, Ordering::SeqCst);
                }
            }
            if opts.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst)) {
                return Err(format!("interrupted before window {w}"));
            }
            if clock.is_virtual() {
                clock.advance(cfg.loop_cfg.window_s);
            }
            let record = collector
                .collect_window(cfg.loop_cfg.window_s, &mask, clock.now())
                .map_err(|e| format!("telemetry, window {w}: {e}"))?;
            sinks.append("measurements.jsonl", &serde_json::to_string(&record).expect("record serializes")).map_err(|e| e.to_string())?;
            measurements.push(record.clone());

            if w == 0 {
                if let (Some(k), Some(store), Some(embedder)) = (cfg.memory.mode.k(), &store, &embedder) {
                    let query = bootstrap_query(&goal, &machine, &start_config, &record);
                    let hold = cfg.memory.hold_out.then_some(workload.as_str());
                    match retrieve(store, embedder.as_ref(), &query, k, hold) {
                        Ok(runs) if !runs.is_empty() => {
                            if let Some(dir) = &sinks.dir {
                                let mut local = MemoryStore::open(&dir.join("memory")).map_err(|e| e.to_string())?;
                                for r in &runs {
                                    store_run(&mut local, embedder.as_ref(), r.clone()).map_err(|e| e.to_string())?;
                                }
                            }
                            let (prompt, p) = synthesize_prior(&goal, &runs, &gateway, clock.now());
                            prompts.push(PromptRecord {
                                window: Some(0),
                                role: Role::Reasoning,
                                request: crate::context::RequestKind::SynthesizePrior,
                                prompt,
                                reply: p.as_ref().map(|p| p.text.clone()).unwrap_or_default(),
                            });
                            sinks.prompts(&prompts[prompts.len() - 1..], &mut prompt_seq).map_err(|e| e.to_string())?;
                            if let Some(p) = p {
                                controller.spec_mut().set_prior(&p.text).map_err(|e| e.to_string())?;
                                prior = Some(p);
                            }
                        }
                        Ok(_) => {}
                        Err(e) => warnings.push(format!("memory retrieval: {e}")),
                    }
                }
            }

            if faults.gateway_from == Some(w) {
                trip.store(true, Ordering::SeqCst);
            }
            if let Some(b) = sim_backend.as_ref() {
                if faults.actuation_at == Some(w) {
                    b.set_failure_plan(FailurePlan { fail_attempts: BTreeSet::from([b.write_attempts() + 1]), ..FailurePlan::default() });
                }
                if faults.actuation_fatal_at == Some(w) {
                    let a = b.write_attempts();
                    b.set_failure_plan(FailurePlan { fail_attempts: (a + 1..a + 64).collect(), ..FailurePlan::default() });
                }
            }
            let decision = controller.boundary(&record).map_err(|e| format!("window {w}: {e}"));
            if faults.actuation_fatal_at.is_some() {
                if let Some(b) = sim_backend.as_ref() {
                    if faults.actuation_fatal_at == Some(w) {
                        b.set_failure_plan(FailurePlan::default());
                    }
                }
            }
            let new_prompts = controller.take_prompts();
            sinks.prompts(&new_prompts, &mut prompt_seq).map_err(|e| e.to_string())?;
            prompts.extend(new_prompts);
            let decision = decision?;
            sinks.append("decisions.jsonl", &serde_json::to_string(&decision).expect("decision serializes")).map_err(|e| e.to_string())?;
            decisions.push(decision);
        }
        Ok(())
    })();

    collector.cleanup();
    let restore = actuator.restore(&snapshot);
    let restoration = RestoreOutcome { complete: restore.residual.is_empty(), writes: restore.writes.len(), residual: restore.residual };

    // report
    let dir_ = direction.unwrap_or(Direction::Min);
    let rewards = |phase: Phase| -> Vec<f64> {
        measurements
            .iter()
            .filter(|m| cfg.loop_cfg.phase_of(m.window_index) == phase)
            .filter_map(|m| m.reward)
            .collect()
    };
    let metric = cfg.reward.metric().unwrap_or("system_bundle").to_string();
    let converged_at = decisions.iter().find(|d| d.converged).map(|d| d.window);
    let usage = account_usage(&gateway.usage_log(), &price_table(cfg));
    let best = controller.state().best.as_ref().map(|(c, r)| (c.assignments.clone(), *r));
    let mut backends = BTreeMap::from([
        ("host".to_string(), format!("{:?}", cfg.host.backend).to_lowercase()),
        ("actuation".to_string(), actuator.backend_kind().to_string()),
    ]);
    for (role, kind) in gateway.backend_kinds() {
        backends.insert(format!("model.{role}"), kind.to_string());
    }
    let mut report = SessionReport {
        run_id: cfg.run_label(),
        mode: cfg.mode.to_string(),
        seed: cfg.seed,
        workload: workload.clone(),
        metric: metric.clone(),
        direction: dir_,
        windows: measurements.len() as u64,
        tuning: PhaseSummary::new(Phase::Tuning, rewards(Phase::Tuning), dir_),
        stable: PhaseSummary::new(Phase::Stable, rewards(Phase::Stable), dir_),
        default_reference: measurements.first().and_then(|m| m.reward),
        best,
        start_config: start_config.clone(),
        final_config: controller.current().assignments.clone(),
        converged_at,
        usage,
        trim: controller.trim_result().cloned(),
        prior,
        restoration,
        deterministic: cfg.deterministic().is_ok() && gateway.deterministic(),
        backends,
        error: run.err(),
        warnings,
    };
    let truth: Vec<TruthRecord> = truth_handle.map(|t| t.lock().unwrap().clone()).unwrap_or_default();

    // memory record at session end
    if report.error.is_none() && cfg.memory.record {
        if let (Some(dir), Some(embedder)) = (&cfg.memory.dir, embedder.as_ref()) {
            let record = run_record(&report, &goal, &machine, &start_config, &decisions, &measurements, controller.audit().records());
            let stored = MemoryStore::open(&cfg.resolve(dir)).and_then(|mut s| store_run(&mut s, embedder.as_ref(), record));
            if let Err(e) = stored {
                report.warnings.push(format!("memory store: {e}"));
            }
        }
    }

    if let Some(dir) = &sinks.dir {
        write_outputs(dir, &report, &measurements, &decisions, &truth, cfg)?;
    }

    Ok(SessionOutcome {
        report,
        decisions,
        measurements,
        prompts,
        audit: controller.audit().records().to_vec(),
        truth,
        sim_backend,
        initial_state,
    })
}

fn run_record(
    report: &SessionReport,
    goal: &Goal,
    machine: &str,
    start: &Assign,
    decisions: &[DecisionRecord],
    measurements: &[MeasurementRecord],
    audit: &[AuditRecord],
) -> RunRecord {
    let mut trace = Vec::new();
    let mut config = start.clone();
    for (m, d) in measurements.iter().zip(decisions) {
        let flat = m.flat_fields();
        let system = flat.iter().filter(|(k, _)| !k.starts_with("app.")).map(|(k, v)| (k.clone(), *v)).collect();
        let app = m.app.as_ref().map(|a| a.values.clone()).unwrap_or_default();
        let action: Assign = audit
            .iter()
            .filter(|a| a.window == d.window && a.commit.as_ref().is_some_and(|c| c.succeeded()))
            .flat_map(|a| a.verdict.accepted.clone())
            .collect();
        trace.push(TraceEntry { window: m.window_index, action: action.clone(), config: config.clone(), system, app });
        config.extend(action);
    }
    let mut summary = format!("workload {}; goal {}; {} windows", report.workload, goal.render(), report.windows);
    if let (Some(d), Some((best, r))) = (report.default_reference, report.best.as_ref()) {
        let _ = write!(summary, "; default {}={d:.4}, best {r:.4}", report.metric);
        let cfg: Vec<String> = best.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = write!(summary, " at {}", cfg.join(", "));
    }
    if let Some(t) = &report.trim {
        let _ = write!(summary, "; trimmed {} knobs, froze {}", t.narrowed.len(), t.frozen.len());
    }
    RunRecord {
        run_id: report.run_id.clone(),
        workload: report.workload.clone(),
        goal: goal.render(),
        machine: machine.to_string(),
        start_config: start.clone(),
        trace,
        summary,
        embedding: Vec::new(),
    }
}

fn write_outputs(
    dir: &Path,
    report: &SessionReport,
    measurements: &[MeasurementRecord],
    decisions: &[DecisionRecord],
    truth: &[TruthRecord],
    cfg: &SessionConfig,
) -> Result<(), SessionError> {
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report).expect("report serializes"))?;
    let mut trace = String::from("window,phase,reward,measured_commit,commit_after,true_value,trapped\n");
    for (i, m) in measurements.iter().enumerate() {
        let d = decisions.get(i);
        let t = truth.get(i);
        let _ = writeln!(
            trace,
            "{},{},{},{},{},{},{}",
            m.window_index,
            if cfg.loop_cfg.phase_of(m.window_index) == Phase::Tuning { "tuning" } else { "stable" },
            m.reward.map_or(String::new(), |r| r.to_string()),
            d.map_or(String::new(), |d| d.measured_commit.to_string()),
            d.map_or(String::new(), |d| d.commit_after.to_string()),
            t.map_or(String::new(), |t| t.true_value.to_string()),
            t.map_or(String::new(), |t| t.trapped.to_string()),
        );
    }
    fs::write(dir.join("trace.csv"), trace)?;
    if !truth.is_empty() {
        let lines: String = truth.iter().map(|t| serde_json::to_string(t).expect("truth serializes") + "\n").collect();
        fs::write(dir.join("truth.jsonl"), lines)?;
    }
    if let (Some(d), false) = (report.default_reference, report.tuning.values.is_empty()) {
        let trace = SessionTrace {
            tuner: report.mode.clone(),
            workload: report.workload.clone(),
            metric: report.metric.clone(),
            direction: report.direction,
            default_mean: d,
            tuning: report.tuning.values.clone(),
            stable: report.stable.values.clone(),
        };
        emit_report(&[trace], dir).map_err(|e| SessionError::Setup(format!("report tables: {e}")))?;
    }
    Ok(())
}

fn machine_label(cfg: &SessionConfig) -> String {
    cfg.host.machine.clone().unwrap_or_else(|| match cfg.host.backend {
        HostBackend::Sim => "simulated host".into(),
        HostBackend::Linux => "linux host".into(),
    })
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, SessionError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SessionError::Setup(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

/// Reads `report.json` from a finished session directory.
pub fn load_report(session_dir: &Path) -> Result<SessionReport, SessionError> {
    let path = session_dir.join("report.json");
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| SessionError::Setup(format!("{}: {e}", path.display())))
}

/// The per-window series of a finished session, for the report tables.
pub fn load_trace(session_dir: &Path) -> Result<SessionTrace, SessionError> {
    let report = load_report(session_dir)?;
    let default_mean = report
        .default_reference
        .ok_or_else(|| SessionError::Setup(format!("{}: no default reference", session_dir.display())))?;
    Ok(SessionTrace {
        tuner: report.mode,
        workload: report.workload,
        metric: report.metric,
        direction: report.direction,
        default_mean,
        tuning: report.tuning.values,
        stable: report.stable.values,
    })
}

/// Rebuilds the memory record of a finished session directory.
pub fn load_run_record(session_dir: &Path) -> Result<RunRecord, SessionError> {
    let cfg = SessionConfig::load(&session_dir.join("config.toml"))?;
    let report = load_report(session_dir)?;
    let decisions: Vec<DecisionRecord> = read_jsonl(&session_dir.join("decisions.jsonl"))?;
    let measurements: Vec<MeasurementRecord> = read_jsonl(&session_dir.join("measurements.jsonl"))?;
    let audit: Vec<AuditRecord> = read_jsonl(&session_dir.join("audit.jsonl"))?;
    let goal = Goal::from_channel(&cfg.reward, cfg.constraints.clone());
    let machine = machine_label(&cfg);
    Ok(run_record(&report, &goal, &machine, &report.start_config, &decisions, &measurements, &audit))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayOutcome {
    Identical,
    Diverged { log: String, window: u64 },
    Refused(String),
}

/// Re-runs a session directory's config and compares the decision and
/// measurement logs byte for byte.
pub fn replay(session_dir: &Path) -> Result<ReplayOutcome, SessionError> {
    let cfg = SessionConfig::load(&session_dir.join("config.toml"))?;
    if let Err(why) = cfg.deterministic() {
        return Ok(ReplayOutcome::Refused(why));
    }
    let scratch = tempfile::tempdir()?;
    let mut again = cfg.clone();
    again.output = Some(scratch.path().join("replay"));
    let outcome = run_session(&again, RunOptions::default())?;
    drop(outcome);
    for log in ["decisions.jsonl", "measurements.jsonl"] {
        let want = fs::read_to_string(session_dir.join(log)).unwrap_or_default();
        let got = fs::read_to_string(scratch.path().join("replay").join(log)).unwrap_or_default();
        let (w, g): (Vec<&str>, Vec<&str>) = (want.lines().collect(), got.lines().collect());
        for i in 0..w.len().max(g.len()) {
            if w.get(i) != g.get(i) {
                return Ok(ReplayOutcome::Diverged { log: log.to_string(), window: i as u64 });
            }
        }
    }
    Ok(ReplayOutcome::Identical)
}
