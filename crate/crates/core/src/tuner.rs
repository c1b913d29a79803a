//! The window-boundary controller: dual instant/reasoning loops, the single
//! loop ablations, trimming with hand-off to a downstream optimizer, and
//! plain baseline runs.
//!
//! Timeline. Window `t` is measured first; its boundary `t` follows. A
//! decision taken at boundary `t` is in force during window `t + 1`.
//! Boundaries `0..tuning_windows` are tuning decisions; later boundaries
//! belong to the stable phase.
//!
//! Order of work at one boundary:
//!
//! 1. annotate the context entries acted on at the previous boundary with
//!    the measurement just taken, and update best-so-far;
//! 2. commit a reasoning result that has arrived (it consumes the pending
//!    instant entries); if it carried updates the instant step is skipped;
//! 3. the instant step;
//! 4. convergence check;
//! 5. issue the next reasoning request when `M` instant entries are pending
//!    and none is in flight.
//!
//! The first reasoning request (R0) is issued before window 0 with an empty
//! context and committed at boundary 0. Its text seeds the strategy section
//! of the session specification rather than becoming a context entry.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{DownstreamTuner, HistoryEntry};
use crate::clock::Clock;
use crate::context::{
    build_update, render_prompt, set_facts, BestSeen, ContextEntry, ContextError, EntryKind, MeasurementSummary,
    PromptState, RequestKind, ResponseSchema, SessionSpecification, SharedContext, DEFAULT_TRACE_LEN,
};
use crate::eval::Phase;
use crate::gateway::{Gateway, Role, TrimDirective, TunerResponse};
use crate::guardrail::{
    validate, Actuator, AuditLog, AuditRecord, CommitRecord, GuardrailError, Proposal, ProposalSource, SessionPolicy,
    ValidationVerdict,
};
use crate::registry::{Configuration, KnobSet, KnobValue, Registry, RegistryError, ValueRange};
use crate::telemetry::{Direction, MeasurementRecord};

type Assign = BTreeMap<String, KnobValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub instant_every_windows: u64,
    /// Pending instant entries that trigger a reasoning request (M).
    pub reasoning_min_pending: usize,
    pub tuning_windows: u64,
    pub stable_windows: u64,
    pub trim_windows: u64,
    /// Quiescent windows required next to the model's flag (K).
    pub quiescent_windows: usize,
    /// Context entries rendered into each prompt (N).
    pub trace_len: usize,
    pub window_s: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            instant_every_windows: 1,
            reasoning_min_pending: 3,
            tuning_windows: 30,
            stable_windows: 20,
            trim_windows: 10,
            quiescent_windows: 3,
            trace_len: DEFAULT_TRACE_LEN,
            window_s: 5.0,
        }
    }
}

impl LoopConfig {
    pub fn total_windows(&self) -> u64 {
        self.tuning_windows + self.stable_windows
    }

    pub fn phase_of(&self, window: u64) -> Phase {
        if window < self.tuning_windows {
            Phase::Tuning
        } else {
            Phase::Stable
        }
    }
}

/// Which tuner drives the tuning windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TunerMode {
    Dual,
    SingleInstant,
    SingleReasoning,
    TrimThenDownstream,
    Baseline(String),
}

impl std::str::FromStr for TunerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dual" => Ok(TunerMode::Dual),
            "single_instant" => Ok(TunerMode::SingleInstant),
            "single_reasoning" => Ok(TunerMode::SingleReasoning),
            "trim_then_downstream" => Ok(TunerMode::TrimThenDownstream),
            other => match other.strip_prefix("baseline:") {
                Some(name) if !name.is_empty() => Ok(TunerMode::Baseline(name.to_string())),
                _ => Err(format!(
                    "unknown mode `{other}` (expected dual, single_instant, single_reasoning, trim_then_downstream or baseline:<name>)"
                )),
            },
        }
    }
}

impl std::fmt::Display for TunerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TunerMode::Dual => f.write_str("dual"),
            TunerMode::SingleInstant => f.write_str("single_instant"),
            TunerMode::SingleReasoning => f.write_str("single_reasoning"),
            TunerMode::TrimThenDownstream => f.write_str("trim_then_downstream"),
            TunerMode::Baseline(n) => write!(f, "baseline:{n}"),
        }
    }
}

impl Serialize for TunerMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TunerMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl TunerMode {
    pub fn uses_instant(&self) -> bool {
        matches!(self, TunerMode::Dual | TunerMode::SingleInstant | TunerMode::TrimThenDownstream)
    }

    pub fn uses_reasoning(&self) -> bool {
        matches!(self, TunerMode::Dual | TunerMode::SingleReasoning)
    }

    /// Baselines keep proposing through the stable phase.
    pub fn tunes_in_stable(&self) -> bool {
        matches!(self, TunerMode::Baseline(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerState {
    pub phase: Phase,
    /// Best measured (configuration, reward) under the goal direction.
    pub best: Option<(Configuration, f64)>,
    pub converged: bool,
    pub window: u64,
}

impl TunerState {
    fn observe(&mut self, config: &Configuration, reward: Option<f64>, direction: Option<Direction>) {
        let (Some(r), Some(d)) = (reward, direction) else { return };
        if self.best.as_ref().is_none_or(|(_, b)| d.better(r, *b)) {
            self.best = Some((config.clone(), r));
        }
    }
}

/// Converged when the model says so and the last `k` window decisions
/// changed nothing, or when the tuning budget is spent.
pub fn decide_convergence(flag: bool, changed: &[bool], k: usize, window: u64, tuning_windows: u64) -> bool {
    let quiet = changed.len() >= k && changed[changed.len() - k..].iter().all(|c| !c);
    (flag && quiet) || window + 1 >= tuning_windows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrimEvent {
    Narrow { window: u64, knob: String, lo: KnobValue, hi: KnobValue },
    Freeze { window: u64, knob: String, value: KnobValue },
    /// A later directive replaced an earlier one for the same knob.
    Revise { window: u64, knob: String, before: String, after: String },
    Ignored { window: u64, knob: String, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrimResult {
    pub narrowed: BTreeMap<String, (KnobValue, KnobValue)>,
    pub frozen: BTreeMap<String, KnobValue>,
    pub revision_log: Vec<TrimEvent>,
}

fn describe_trim(narrowed: Option<&(KnobValue, KnobValue)>, frozen: Option<&KnobValue>) -> String {
    match (narrowed, frozen) {
        (Some((lo, hi)), _) => format!("narrowed [{lo}, {hi}]"),
        (None, Some(v)) => format!("frozen at {v}"),
        (None, None) => "free".to_string(),
    }
}

impl TrimResult {
    pub fn is_identity(&self) -> bool {
        self.narrowed.is_empty() && self.frozen.is_empty()
    }

    /// Folds one directive in. Later evidence wins per knob: a narrow on a
    /// frozen knob unfreezes it, a wider range replaces a narrower one.
    pub fn absorb(&mut self, window: u64, directive: &TrimDirective, set: &KnobSet) {
        for (knob, (lo, hi)) in &directive.narrow {
            let Some(spec) = set.get(knob) else {
                self.revision_log.push(TrimEvent::Ignored { window, knob: knob.clone(), reason: "not in the set".into() });
                continue;
            };
            let declared = spec.declared_range();
            let (Some(a), Some(b)) = (spec.ordinal(lo), spec.ordinal(hi)) else {
                self.revision_log.push(TrimEvent::Ignored { window, knob: knob.clone(), reason: "bound outside the domain".into() });
                continue;
            };
            let range = ValueRange::new(a.min(b), a.max(b));
            if !range.is_within(&declared) || range.lo == range.hi {
                self.revision_log.push(TrimEvent::Ignored { window, knob: knob.clone(), reason: "empty or outside the domain".into() });
                continue;
            }
            let value = (spec.from_ordinal(range.lo), spec.from_ordinal(range.hi));
            let before = describe_trim(self.narrowed.get(knob), self.frozen.get(knob));
            if self.narrowed.contains_key(knob) || self.frozen.contains_key(knob) {
                self.revision_log.push(TrimEvent::Revise {
                    window,
                    knob: knob.clone(),
                    before,
                    after: describe_trim(Some(&value), None),
                });
            }
            self.frozen.remove(knob);
            self.revision_log.push(TrimEvent::Narrow { window, knob: knob.clone(), lo: value.0.clone(), hi: value.1.clone() });
            self.narrowed.insert(knob.clone(), value);
        }
        for (knob, value) in &directive.freeze {
            let Some(spec) = set.get(knob) else {
                self.revision_log.push(TrimEvent::Ignored { window, knob: knob.clone(), reason: "not in the set".into() });
                continue;
            };
            if spec.ordinal(value).is_none() {
                self.revision_log.push(TrimEvent::Ignored { window, knob: knob.clone(), reason: format!("{value} outside the domain") });
                continue;
            }
            if self.narrowed.contains_key(knob) || self.frozen.get(knob).is_some_and(|v| v != value) {
                self.revision_log.push(TrimEvent::Revise {
                    window,
                    knob: knob.clone(),
                    before: describe_trim(self.narrowed.get(knob), self.frozen.get(knob)),
                    after: describe_trim(None, Some(value)),
                });
            }
            self.narrowed.remove(knob);
            self.revision_log.push(TrimEvent::Freeze { window, knob: knob.clone(), value: value.clone() });
            self.frozen.insert(knob.clone(), value.clone());
        }
    }

    /// Installs narrowed ranges on the set and frozen knobs as policy.
    pub fn install(&self, set: &mut KnobSet, policy: &mut SessionPolicy) -> Result<(), RegistryError> {
        for (knob, (lo, hi)) in &self.narrowed {
            let spec = set.get(knob).ok_or_else(|| RegistryError::UnknownKnob(knob.clone()))?.clone();
            let (a, b) = (spec.ordinal(lo).unwrap_or(0), spec.ordinal(hi).unwrap_or(0));
            set.set_active_range(knob, ValueRange::new(a, b))?;
        }
        for (knob, value) in &self.frozen {
            policy.frozen.insert(knob.clone(), value.clone());
        }
        Ok(())
    }

    /// The set handed to the downstream optimizer: frozen knobs removed,
    /// narrowed ranges kept.
    pub fn reduced_set(&self, set: &KnobSet, registry: &Registry) -> Result<KnobSet, RegistryError> {
        let names: Vec<&str> = set.names().filter(|n| !self.frozen.contains_key(*n)).collect();
        let mut reduced = registry.resolve_tunable_set(&names)?;
        for (spec, range) in set.active_ranges() {
            if reduced.get(&spec.name).is_some() {
                reduced.set_active_range(&spec.name, range)?;
            }
        }
        Ok(reduced)
    }
}

#[derive(Debug, Error)]
pub enum TunerError {
    #[error(transparent)]
    Guardrail(#[from] GuardrailError),
    #[error("audit log: {0}")]
    Audit(#[from] std::io::Error),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("rollback left {0:?} in an unknown state")]
    Residual(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitSummary {
    pub commit_id: u64,
    pub succeeded: bool,
    pub writes: usize,
}

/// One proposal considered at a boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub source: ProposalSource,
    pub proposal: Proposal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ValidationVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit: Option<CommitSummary>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dropped: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub errored: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub converged_flag: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Decision {
    fn changed(&self) -> bool {
        self.commit.as_ref().is_some_and(|c| c.succeeded && c.writes > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LoopEvent {
    ReasoningIssued { at: f64, ready_at: f64 },
    ReasoningCommitted { issued_window: Option<u64> },
    ReasoningDiscarded { issued_window: Option<u64> },
    TrimInstalled,
    Handoff { tuner: String },
    DownstreamFailed { message: String },
}

/// One record per window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub window: u64,
    pub phase: Phase,
    /// Commit in force while the window was measured.
    pub measured_commit: u64,
    pub reward: Option<f64>,
    pub decisions: Vec<Decision>,
    /// Commit in force after the boundary.
    pub commit_after: u64,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<LoopEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    /// Boundary at which the request was made; `None` before window 0.
    pub window: Option<u64>,
    pub role: Role,
    pub request: RequestKind,
    pub prompt: String,
    pub reply: String,
}

enum InFlight {
    Ready { issued_window: Option<u64>, ready_at: f64, response: TunerResponse },
    Thread { issued_window: Option<u64>, handle: JoinHandle<TunerResponse> },
}

/// Everything the controller needs from the session.
pub struct ControllerParts {
    pub registry: Registry,
    pub set: KnobSet,
    pub policy: SessionPolicy,
    pub current: Configuration,
    pub actuator: Arc<Actuator>,
    pub gateway: Gateway,
    pub clock: Arc<dyn Clock>,
    pub spec: SessionSpecification,
    pub loop_cfg: LoopConfig,
    pub direction: Option<Direction>,
    pub salient: Vec<String>,
    pub audit: AuditLog,
    pub seed: u64,
}

pub struct Controller {
    registry: Registry,
    set: KnobSet,
    policy: SessionPolicy,
    current: Configuration,
    actuator: Arc<Actuator>,
    gateway: Gateway,
    clock: Arc<dyn Clock>,
    spec: SessionSpecification,
    cfg: LoopConfig,
    direction: Option<Direction>,
    salient: Vec<String>,
    audit: AuditLog,
    seed: u64,
    mode: TunerMode,
    context: SharedContext,
    state: TunerState,
    inflight: Option<InFlight>,
    changed: Vec<bool>,
    history: Vec<HistoryEntry>,
    downstream: Option<Box<dyn DownstreamTuner>>,
    downstream_active: bool,
    handed_off: bool,
    trim: Option<TrimResult>,
    prompts: Vec<PromptRecord>,
    events: Vec<LoopEvent>,
}

impl Controller {
    /// `downstream` is the baseline in baseline mode and the post-trim
    /// optimizer in trimming mode.
    pub fn new(parts: ControllerParts, mode: TunerMode, downstream: Option<Box<dyn DownstreamTuner>>) -> Self {
        Self {
            registry: parts.registry,
            set: parts.set,
            policy: parts.policy,
            current: parts.current,
            actuator: parts.actuator,
            gateway: parts.gateway,
            clock: parts.clock,
            spec: parts.spec,
            cfg: parts.loop_cfg,
            direction: parts.direction,
            salient: parts.salient,
            audit: parts.audit,
            seed: parts.seed,
            mode,
            context: SharedContext::new(),
            state: TunerState { phase: Phase::Tuning, best: None, converged: false, window: 0 },
            inflight: None,
            changed: Vec::new(),
            history: Vec::new(),
            downstream,
            downstream_active: false,
            handed_off: false,
            trim: None,
            prompts: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn state(&self) -> &TunerState {
        &self.state
    }

    pub fn current(&self) -> &Configuration {
        &self.current
    }

    pub fn set(&self) -> &KnobSet {
        &self.set
    }

    pub fn policy(&self) -> &SessionPolicy {
        &self.policy
    }

    pub fn context(&self) -> &SharedContext {
        &self.context
    }

    pub fn spec(&self) -> &SessionSpecification {
        &self.spec
    }

    pub fn spec_mut(&mut self) -> &mut SessionSpecification {
        &mut self.spec
    }

    pub fn trim_result(&self) -> Option<&TrimResult> {
        self.trim.as_ref()
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn reasoning_in_flight(&self) -> bool {
        self.inflight.is_some()
    }

    /// Prompts rendered since the last call.
    pub fn take_prompts(&mut self) -> Vec<PromptRecord> {
        std::mem::take(&mut self.prompts)
    }

    /// Session start, before window 0: issues R0 in dual mode and
    /// initializes a baseline.
    pub fn start(&mut self) -> Result<(), TunerError> {
        match &self.mode {
            TunerMode::Dual => self.issue_reasoning(None, None, &Assign::new())?,
            TunerMode::Baseline(_) => {
                let direction = self.direction.unwrap_or(Direction::Min);
                let seed = self.seed;
                if let Some(d) = self.downstream.as_mut() {
                    if let Err(e) = d.init(&self.set, direction, seed) {
                        self.events.push(LoopEvent::DownstreamFailed { message: e.to_string() });
                        self.downstream = None;
                    }
                }
                self.downstream_active = self.downstream.is_some();
            }
            _ => {}
        }
        Ok(())
    }

    /// Handles the boundary after `record`'s window.
    pub fn boundary(&mut self, record: &MeasurementRecord) -> Result<DecisionRecord, TunerError> {
        let w = record.window_index;
        self.state.window = w;
        let measured = self.current.clone();
        let phase = self.cfg.phase_of(w);
        if phase == Phase::Stable {
            self.state.phase = Phase::Stable;
        }

        // 1. outcomes
        if w > 0 {
            self.context.record_outcome(w - 1, &self.summary(record));
        }
        self.state.observe(&measured, record.reward, self.direction);
        if let Some(r) = record.reward {
            self.history.push(HistoryEntry { config: measured.assignments.clone(), reward: r });
            if let Some(d) = self.downstream.as_mut().filter(|_| self.downstream_active) {
                d.observe(&measured.assignments, r);
            }
        }

        let last_boundary = w + 1 >= self.cfg.total_windows();
        let mut decisions = Vec::new();
        let mut flag = false;
        if !last_boundary {
            match self.mode.clone() {
                TunerMode::Dual | TunerMode::SingleInstant | TunerMode::SingleReasoning => {
                    if phase == Phase::Tuning && !self.state.converged {
                        flag = self.llm_boundary(w, record, &measured.assignments, &mut decisions)?;
                    } else {
                        self.discard_inflight();
                    }
                }
                TunerMode::TrimThenDownstream => {
                    if phase == Phase::Tuning && !self.state.converged {
                        self.trim_boundary(w, record, &measured.assignments, &mut decisions)?;
                    }
                }
                TunerMode::Baseline(_) => self.downstream_step(w, &mut decisions)?,
            }
        } else {
            self.discard_inflight();
        }

        if phase == Phase::Tuning {
            self.changed.push(decisions.iter().any(Decision::changed));
            if !self.state.converged
                && !matches!(self.mode, TunerMode::Baseline(_))
                && decide_convergence(flag, &self.changed, self.cfg.quiescent_windows, w, self.cfg.tuning_windows)
            {
                self.state.converged = true;
                self.state.phase = Phase::Stable;
                self.discard_inflight();
            }
        }

        Ok(DecisionRecord {
            window: w,
            phase,
            measured_commit: measured.commit_id,
            reward: record.reward,
            decisions,
            commit_after: self.current.commit_id,
            converged: self.state.converged,
            events: std::mem::take(&mut self.events),
        })
    }

    fn summary(&self, record: &MeasurementRecord) -> MeasurementSummary {
        let salient: Vec<&str> = self.salient.iter().map(String::as_str).collect();
        MeasurementSummary::of(record, &salient)
    }

    fn prompt(
        &self,
        kind: RequestKind,
        latest: Option<&MeasurementRecord>,
        measured: &Assign,
    ) -> (String, ResponseSchema) {
        let schema = ResponseSchema::for_set(&self.set, &self.policy.frozen);
        let (ranges, ordering) = set_facts(&self.set, &self.policy.frozen);
        let signals = latest
            .map(|r| {
                let flat = r.flat_fields();
                self.salient.iter().filter_map(|k| flat.get(k).map(|v| (k.clone(), *v))).collect()
            })
            .unwrap_or_default();
        let state = PromptState {
            request: kind,
            window: latest.map(|r| r.window_index),
            tuning_windows: self.cfg.tuning_windows,
            metric: self.spec.goal.metric.clone(),
            direction: self.spec.goal.direction,
            measured: measured.clone(),
            current: self.current.assignments.clone(),
            reward: latest.and_then(|r| r.reward),
            noise_pct: latest.and_then(|r| r.noise_pct),
            signals,
            best: self.state.best.as_ref().map(|(c, r)| BestSeen { config: c.assignments.clone(), reward: *r }),
            ranges,
            frozen: self.policy.frozen.clone(),
            ordering,
        };
        let salient: Vec<&str> = self.salient.iter().map(String::as_str).collect();
        let mut update = build_update(&self.set, &self.current, latest, &salient, state);
        update.trace_len = self.cfg.trace_len;
        render_prompt(&self.spec, &update, &self.context.snapshot(), &schema)
    }

    fn ask(&mut self, role: Role, kind: RequestKind, window: Option<u64>, latest: Option<&MeasurementRecord>, measured: &Assign) -> TunerResponse {
        let (prompt, schema) = self.prompt(kind, latest, measured);
        let resp = self.gateway.request(role, &prompt, &schema);
        self.prompts.push(PromptRecord { window, role, request: kind, prompt, reply: resp.raw.clone() });
        resp
    }

    fn issue_reasoning(&mut self, window: Option<u64>, latest: Option<&MeasurementRecord>, measured: &Assign) -> Result<(), TunerError> {
        let now = self.clock.now();
        if self.clock.is_virtual() {
            let resp = self.ask(Role::Reasoning, RequestKind::Reasoning, window, latest, measured);
            let ready_at = now + resp.latency_s;
            self.events.push(LoopEvent::ReasoningIssued { at: now, ready_at });
            self.inflight = Some(InFlight::Ready { issued_window: window, ready_at, response: resp });
        } else {
            let (prompt, schema) = self.prompt(RequestKind::Reasoning, latest, measured);
            let gateway = self.gateway.clone();
            let text = prompt.clone();
            let handle = std::thread::spawn(move || gateway.request(Role::Reasoning, &text, &schema));
            self.prompts.push(PromptRecord { window, role: Role::Reasoning, request: RequestKind::Reasoning, prompt, reply: String::new() });
            self.events.push(LoopEvent::ReasoningIssued { at: now, ready_at: f64::NAN });
            self.inflight = Some(InFlight::Thread { issued_window: window, handle });
        }
        Ok(())
    }

    /// Takes the in-flight reasoning result if it has arrived.
    fn arrived(&mut self) -> Option<(Option<u64>, TunerResponse)> {
        let ready = match self.inflight.as_ref()? {
            InFlight::Ready { ready_at, .. } => self.clock.now() >= *ready_at,
            InFlight::Thread { handle, .. } => handle.is_finished(),
        };
        if !ready {
            return None;
        }
        match self.inflight.take()? {
            InFlight::Ready { issued_window, response, .. } => Some((issued_window, response)),
            InFlight::Thread { issued_window, handle } => {
                let resp = handle.join().unwrap_or_else(|_| TunerResponse::errored("reasoning thread panicked", ""));
                Some((issued_window, resp))
            }
        }
    }

    fn discard_inflight(&mut self) {
        if let Some(f) = self.inflight.take() {
            let issued_window = match f {
                InFlight::Ready { issued_window, .. } | InFlight::Thread { issued_window, .. } => issued_window,
            };
            self.events.push(LoopEvent::ReasoningDiscarded { issued_window });
        }
    }

    /// Validates and applies one proposal; writes the audit record.
    fn act(&mut self, window: u64, proposal: Proposal, commands: Vec<String>) -> Result<Decision, TunerError> {
        let verdict = validate(&proposal, &self.set, &self.current, &self.policy);
        let commit: Option<CommitRecord> = if verdict.accepted.is_empty() {
            None
        } else {
            let rec = self.actuator.apply(&verdict.accepted, &self.set, &self.current, &proposal.justification)?;
            if !rec.residual.is_empty() {
                let residual = rec.residual.clone();
                self.audit.append(AuditRecord { window, proposal, verdict, commit: Some(rec), quarantined_commands: commands })?;
                return Err(TunerError::Residual(residual));
            }
            if let Some(cfg) = &rec.resulting_config {
                self.current = cfg.clone();
            }
            Some(rec)
        };
        let summary = commit.as_ref().map(|c| CommitSummary {
            commit_id: c.commit_id,
            succeeded: c.succeeded(),
            writes: c.writes.len(),
        });
        let note = match &commit {
            Some(c) if !c.succeeded() => "commit failed and was rolled back".to_string(),
            _ => String::new(),
        };
        self.audit.append(AuditRecord {
            window,
            proposal: proposal.clone(),
            verdict: verdict.clone(),
            commit,
            quarantined_commands: commands,
        })?;
        Ok(Decision {
            source: proposal.source,
            proposal,
            verdict: Some(verdict),
            commit: summary,
            dropped: false,
            errored: false,
            converged_flag: false,
            note,
        })
    }

    fn respond(&mut self, window: u64, source: ProposalSource, resp: &TunerResponse) -> Result<Decision, TunerError> {
        let proposal = Proposal { updates: resp.updates.clone(), justification: resp.justification.clone(), source, iteration: window };
        let mut d = self.act(window, proposal, resp.commands.clone())?;
        d.errored = resp.errored;
        d.converged_flag = resp.converged;
        if resp.errored {
            d.note = format!("model request failed: {}", resp.error.clone().unwrap_or_default());
        }
        Ok(d)
    }

    fn entry(&self, kind: EntryKind, window: u64, d: &Decision) -> ContextEntry {
        let mut justification = d.proposal.justification.clone();
        if d.errored {
            justification = format!("no-op ({})", d.note);
        }
        if let Some(v) = &d.verdict {
            if !v.rejections.is_empty() {
                let r: Vec<String> = v.rejections.iter().map(|r| format!("{} {:?}", r.knob, r.reason)).collect();
                justification.push_str(&format!(" [rejected: {}]", r.join(", ")));
            }
        }
        ContextEntry {
            kind,
            iteration: window,
            action: d.verdict.as_ref().map(|v| v.accepted.clone()).unwrap_or_default(),
            config_after: self.current.commit_id,
            measurement_summary: None,
            justification,
        }
    }

    /// Returns the model's convergence flag for this boundary.
    fn llm_boundary(
        &mut self,
        w: u64,
        record: &MeasurementRecord,
        measured: &Assign,
        decisions: &mut Vec<Decision>,
    ) -> Result<bool, TunerError> {
        let mut flag = false;
        if self.mode == TunerMode::SingleReasoning {
            let resp = self.ask(Role::Reasoning, RequestKind::Reasoning, Some(w), Some(record), measured);
            let d = self.respond(w, ProposalSource::Reasoning, &resp)?;
            self.context.commit_reasoning(self.entry(EntryKind::Reasoning, w, &d))?;
            flag = resp.converged;
            decisions.push(d);
            return Ok(flag);
        }

        // 2. reasoning commit
        let mut skip_instant = false;
        if let Some((issued, resp)) = self.arrived() {
            let d = self.respond(w, ProposalSource::Reasoning, &resp)?;
            if issued.is_none() {
                // R0 seeds the strategy instead of entering the context
                if !resp.errored && !resp.justification.trim().is_empty() {
                    self.spec.strategy_text = resp.justification.trim().to_string();
                }
            } else {
                self.context.commit_reasoning(self.entry(EntryKind::Reasoning, w, &d))?;
            }
            self.events.push(LoopEvent::ReasoningCommitted { issued_window: issued });
            skip_instant = !resp.updates.is_empty();
            flag |= resp.converged;
            decisions.push(d);
        }

        // 3. instant
        if w % self.cfg.instant_every_windows.max(1) == 0 {
            if skip_instant {
                decisions.push(Decision {
                    source: ProposalSource::Instant,
                    proposal: Proposal::new(ProposalSource::Instant, w),
                    verdict: None,
                    commit: None,
                    dropped: true,
                    errored: false,
                    converged_flag: false,
                    note: "reasoning committed updates at this boundary".into(),
                });
            } else {
                let resp = self.ask(Role::Instant, RequestKind::Instant, Some(w), Some(record), measured);
                let d = self.respond(w, ProposalSource::Instant, &resp)?;
                self.context.append_entry(self.entry(EntryKind::Instant, w, &d))?;
                flag |= resp.converged;
                decisions.push(d);
            }
        }

        // 5. next reasoning request
        if self.mode == TunerMode::Dual
            && self.inflight.is_none()
            && self.context.pending_len() >= self.cfg.reasoning_min_pending
            && w + 1 < self.cfg.tuning_windows
        {
            self.issue_reasoning(Some(w), Some(record), measured)?;
        }
        Ok(flag)
    }

    fn trim_boundary(
        &mut self,
        w: u64,
        record: &MeasurementRecord,
        measured: &Assign,
        decisions: &mut Vec<Decision>,
    ) -> Result<(), TunerError> {
        let tw = self.cfg.trim_windows.min(self.cfg.tuning_windows);
        if w + 1 < tw {
            let resp = self.ask(Role::Instant, RequestKind::Instant, Some(w), Some(record), measured);
            let d = self.respond(w, ProposalSource::Instant, &resp)?;
            self.context.append_entry(self.entry(EntryKind::Instant, w, &d))?;
            if let Some(t) = &resp.trim {
                let set = self.set.clone();
                self.trim.get_or_insert_with(TrimResult::default).absorb(w, t, &set);
            }
            decisions.push(d);
            return Ok(());
        }
        if !self.handed_off {
            if tw > 0 {
                let role = if self.gateway.has_role(Role::Reasoning) { Role::Reasoning } else { Role::Instant };
                let mut resp = self.ask(role, RequestKind::Trim, Some(w), Some(record), measured);
                let set = self.set.clone();
                let trim = self.trim.get_or_insert_with(TrimResult::default);
                if let Some(t) = &resp.trim {
                    trim.absorb(w, t, &set);
                }
                // frozen knobs move to their fixed value with this commit
                for (k, v) in trim.frozen.clone() {
                    if self.current.get(&k) != Some(&v) {
                        resp.updates.insert(k, v);
                    }
                }
                let d = self.respond(w, ProposalSource::Reasoning, &resp)?;
                self.context.commit_reasoning(self.entry(EntryKind::Reasoning, w, &d))?;
                decisions.push(d);
                let trim = self.trim.clone().unwrap_or_default();
                trim.install(&mut self.set, &mut self.policy)?;
                self.events.push(LoopEvent::TrimInstalled);
                return self.handoff(w, decisions);
            }
            self.trim = Some(TrimResult::default());
            self.handoff(w, decisions)?;
        }
        if w + 1 >= self.cfg.tuning_windows {
            self.settle(w, decisions, "hand-off complete: hold the best configuration so far")
        } else {
            self.downstream_step(w, decisions)
        }
    }

    fn handoff(&mut self, w: u64, decisions: &mut Vec<Decision>) -> Result<(), TunerError> {
        self.handed_off = true;
        let reduced = self.trim.clone().unwrap_or_default().reduced_set(&self.set, &self.registry)?;
        let direction = self.direction.unwrap_or(Direction::Min);
        let seed = self.seed;
        let Some(d) = self.downstream.as_mut() else {
            return self.abort_downstream(w, decisions, "no downstream tuner configured".into());
        };
        let name = d.name().to_string();
        if let Err(e) = d.init(&reduced, direction, seed) {
            return self.abort_downstream(w, decisions, e.to_string());
        }
        self.downstream_active = true;
        self.events.push(LoopEvent::Handoff { tuner: name });
        Ok(())
    }

    fn abort_downstream(&mut self, w: u64, decisions: &mut Vec<Decision>, message: String) -> Result<(), TunerError> {
        self.downstream_active = false;
        self.events.push(LoopEvent::DownstreamFailed { message });
        if decisions.is_empty() {
            self.settle(w, decisions, "downstream tuner failed: hold the best configuration so far")?;
        }
        self.state.converged = true;
        self.state.phase = Phase::Stable;
        Ok(())
    }

    fn downstream_step(&mut self, w: u64, decisions: &mut Vec<Decision>) -> Result<(), TunerError> {
        if !self.downstream_active {
            return Ok(());
        }
        let Some(d) = self.downstream.as_mut() else { return Ok(()) };
        let name = d.name().to_string();
        match d.propose(&self.history, &self.current.assignments) {
            Ok(updates) => {
                let proposal = Proposal {
                    updates,
                    justification: format!("{name} proposal"),
                    source: ProposalSource::Baseline,
                    iteration: w,
                };
                let decision = self.act(w, proposal, Vec::new())?;
                decisions.push(decision);
                Ok(())
            }
            Err(e) => self.abort_downstream(w, decisions, e.to_string()),
        }
    }

    /// Moves to the best measured configuration, if it differs.
    fn settle(&mut self, w: u64, decisions: &mut Vec<Decision>, why: &str) -> Result<(), TunerError> {
        let Some((best, _)) = self.state.best.clone() else { return Ok(()) };
        let updates: Assign = best
            .assignments
            .iter()
            .filter(|(k, v)| self.current.get(k) != Some(*v) && !self.policy.frozen.contains_key(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let proposal = Proposal { updates, justification: why.to_string(), source: ProposalSource::Baseline, iteration: w };
        let decision = self.act(w, proposal, Vec::new())?;
        decisions.push(decision);
        Ok(())
    }
}
