//! Prompt construction and the shared dual-loop context.
//!
//! A prompt is a stable session specification (role, goal, knobs, schema
//! metadata, strategy, optional cross-run prior) followed by a per-iteration
//! update (config, latest measurement, trace of visible context entries) and
//! a `State:` line carrying the same facts as one JSON object for
//! machine-readable consumption.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{Configuration, KnobSet, KnobValue, RuleKind};
use crate::telemetry::{Direction, MeasurementRecord, RewardChannel};

pub const DEFAULT_ROLE_TEXT: &str = "You are an operating-system tuning agent. You propose changes to the \
listed kernel knobs only; every proposal is validated and applied by the host, which may reject it.";

/// Explore/exploit schedule; the switch happens halfway through the tuning
/// windows.
pub const DEFAULT_STRATEGY_TEXT: &str = "early (windows 0-14): explore ranges broadly, one or two knobs per \
step; later (windows 15-29): exploit around the best configuration seen, small steps; noise-aware: treat \
differences within the reported noise as ties and re-measure before committing to them.";

pub const DEFAULT_TRACE_LEN: usize = 8;

/// Metrics shown next to the reward in entry summaries and the Latest line.
pub const DEFAULT_SALIENT: [&str; 2] = ["ipc", "power.pkg_w"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("reasoning entries must go through commit_reasoning")]
    ReasoningViaAppend,
    #[error("commit_reasoning expects a reasoning entry")]
    InstantViaCommit,
    #[error("memory prior already set")]
    PriorAlreadySet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub metric: String,
    /// `<` or `>`.
    pub op: String,
    pub value: f64,
    #[serde(default)]
    pub units: String,
}

impl Constraint {
    pub fn render(&self) -> String {
        let units = if self.units.is_empty() { String::new() } else { format!(" {}", self.units) };
        format!("{} {} {}{}", self.metric, self.op, self.value, units)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    /// Goal metric; for the system bundle channel this names the bundle.
    pub metric: String,
    pub direction: Direction,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

impl Goal {
    pub fn from_channel(channel: &RewardChannel, constraints: Vec<Constraint>) -> Self {
        match channel {
            RewardChannel::App { metric, direction } | RewardChannel::Proxy { metric, direction } => {
                Self { metric: metric.clone(), direction: *direction, constraints }
            }
            // the bundle has no scalar: the model reads the whole record
            RewardChannel::SystemBundle => Self { metric: "system_bundle".into(), direction: Direction::Max, constraints },
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("{} {}", self.direction.label(), self.metric);
        for c in &self.constraints {
            s.push_str("; ");
            s.push_str(&c.render());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpecification {
    pub role_text: String,
    pub goal: Goal,
    pub knob_names: Vec<String>,
    pub knob_schema_block: String,
    pub strategy_text: String,
    pub memory_prior: Option<String>,
}

impl SessionSpecification {
    /// Sets the prior; allowed once per session.
    pub fn set_prior(&mut self, text: &str) -> Result<(), ContextError> {
        if self.memory_prior.is_some() {
            return Err(ContextError::PriorAlreadySet);
        }
        self.memory_prior = Some(text.to_string());
        Ok(())
    }

    /// Rebuilds the knob sections after active ranges changed (trimming).
    pub fn refresh_knobs(&mut self, set: &KnobSet) {
        self.knob_names = set.names().map(str::to_string).collect();
        self.knob_schema_block = set.describe_for_prompt();
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "## Role\n{}\n", self.role_text);
        let _ = writeln!(out, "## Goal\n{}\n", self.goal.render());
        let _ = writeln!(out, "## Knobs\n{}\n", self.knob_names.join(", "));
        let _ = writeln!(out, "## Meta\n{}", self.knob_schema_block);
        let _ = writeln!(out, "## Strategy\n{}\n", self.strategy_text);
        if let Some(prior) = &self.memory_prior {
            let _ = writeln!(out, "## Prior\n{prior}\n");
        }
        out
    }
}

pub fn build_session_spec(goal: Goal, set: &KnobSet, strategy_text: &str, prior: Option<&str>) -> SessionSpecification {
    SessionSpecification {
        role_text: DEFAULT_ROLE_TEXT.to_string(),
        goal,
        knob_names: set.names().map(str::to_string).collect(),
        knob_schema_block: set.describe_for_prompt(),
        strategy_text: strategy_text.to_string(),
        memory_prior: prior.map(str::to_string),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Instant,
    Reasoning,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSummary {
    pub reward: Option<f64>,
    pub salient: BTreeMap<String, f64>,
}

impl MeasurementSummary {
    pub fn of(record: &MeasurementRecord, salient: &[&str]) -> Self {
        let flat = record.flat_fields();
        Self {
            reward: record.reward,
            salient: salient.iter().filter_map(|k| flat.get(*k).map(|v| (k.to_string(), *v))).collect(),
        }
    }

    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if let Some(r) = self.reward {
            parts.push(format!("reward={}", short(r)));
        }
        for (k, v) in &self.salient {
            parts.push(format!("{k}={}", short(*v)));
        }
        parts.join(" ")
    }
}

/// Four significant digits, trailing zeros trimmed.
pub fn short(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let digits = (3 - v.abs().log10().floor() as i32).max(0) as usize;
    let s = format!("{v:.digits$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub kind: EntryKind,
    /// Window boundary at which the entry's action was taken.
    pub iteration: u64,
    pub action: BTreeMap<String, KnobValue>,
    pub config_after: u64,
    /// Measurement of the window following the action; filled in once that
    /// window completes.
    pub measurement_summary: Option<MeasurementSummary>,
    pub justification: String,
}

impl ContextEntry {
    pub fn render(&self) -> String {
        let tag = match self.kind {
            EntryKind::Instant => "I",
            EntryKind::Reasoning => "R",
        };
        let action = if self.action.is_empty() {
            "no-op".to_string()
        } else {
            self.action.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
        };
        let outcome = self.measurement_summary.as_ref().map_or("pending".to_string(), |m| m.render());
        format!("[{tag} w{}] {action} -> commit {}; {outcome} | {}", self.iteration, self.config_after, self.justification)
    }
}

/// Reasoning entries persist; instant entries are visible only until the
/// next reasoning commit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SharedContext {
    reasoning_entries: Vec<ContextEntry>,
    pending_instant_entries: Vec<ContextEntry>,
}

impl SharedContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append_entry(&mut self, entry: ContextEntry) -> Result<(), ContextError> {
        if entry.kind != EntryKind::Instant {
            return Err(ContextError::ReasoningViaAppend);
        }
        self.pending_instant_entries.push(entry);
        Ok(())
    }

    pub fn commit_reasoning(&mut self, entry: ContextEntry) -> Result<(), ContextError> {
        if entry.kind != EntryKind::Reasoning {
            return Err(ContextError::InstantViaCommit);
        }
        self.reasoning_entries.push(entry);
        self.pending_instant_entries.clear();
        Ok(())
    }

    /// Fills the measurement summary of entries acted on at `iteration`.
    pub fn record_outcome(&mut self, iteration: u64, summary: &MeasurementSummary) {
        for e in self.reasoning_entries.iter_mut().chain(self.pending_instant_entries.iter_mut()) {
            if e.iteration == iteration && e.measurement_summary.is_none() {
                e.measurement_summary = Some(summary.clone());
            }
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending_instant_entries.len()
    }

    pub fn reasoning_len(&self) -> usize {
        self.reasoning_entries.len()
    }

    /// Visible entries, oldest first.
    pub fn visible(&self) -> Vec<&ContextEntry> {
        self.reasoning_entries.iter().chain(self.pending_instant_entries.iter()).collect()
    }

    /// Immutable copy of the visible entries, for prompts rendered while a
    /// reasoning request is in flight.
    pub fn snapshot(&self) -> Vec<ContextEntry> {
        self.visible().into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Instant,
    Reasoning,
    Trim,
    SynthesizePrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSeen {
    pub config: BTreeMap<String, KnobValue>,
    pub reward: f64,
}

/// Machine-readable facts of the per-iteration update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub request: RequestKind,
    /// Latest measured window, absent before the first window.
    pub window: Option<u64>,
    pub tuning_windows: u64,
    pub metric: String,
    pub direction: Direction,
    /// Config in force during the latest window.
    pub measured: BTreeMap<String, KnobValue>,
    pub current: BTreeMap<String, KnobValue>,
    pub reward: Option<f64>,
    pub noise_pct: Option<f64>,
    pub signals: BTreeMap<String, f64>,
    pub best: Option<BestSeen>,
    /// Active range per permitted knob as (lowest, highest) legal value.
    pub ranges: BTreeMap<String, (KnobValue, KnobValue)>,
    pub frozen: BTreeMap<String, KnobValue>,
    pub ordering: Vec<(String, String)>,
}

impl PromptState {
    /// Extracts the state from a rendered prompt.
    pub fn from_prompt(prompt: &str) -> Option<Self> {
        prompt.lines().rev().find_map(|l| l.strip_prefix("State: ")).and_then(|j| serde_json::from_str(j).ok())
    }
}

/// Fills the set-derived fields of a state.
pub fn set_facts(
    set: &KnobSet,
    frozen: &BTreeMap<String, KnobValue>,
) -> (BTreeMap<String, (KnobValue, KnobValue)>, Vec<(String, String)>) {
    let ranges = set
        .active_ranges()
        .filter(|(s, _)| !frozen.contains_key(&s.name))
        .map(|(s, r)| (s.name.clone(), (s.from_ordinal(r.lo), s.from_ordinal(r.hi))))
        .collect();
    let ordering = set
        .rules()
        .iter()
        .filter(|r| r.kind == RuleKind::Ordering)
        .map(|r| (r.members[0].clone(), r.members[1].clone()))
        .collect();
    (ranges, ordering)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerIterationUpdate {
    pub current_config: String,
    pub latest: String,
    pub trace_len: usize,
    pub state: PromptState,
}

pub fn build_update(
    set: &KnobSet,
    current: &Configuration,
    latest: Option<&MeasurementRecord>,
    salient: &[&str],
    state: PromptState,
) -> PerIterationUpdate {
    let latest = match latest {
        None => "none yet".to_string(),
        Some(r) => {
            let mut parts = Vec::new();
            if let Some(app) = &r.app {
                for (k, v) in &app.values {
                    parts.push(format!("app {k}={}", short(*v)));
                }
            }
            if let Some(n) = r.noise_pct {
                parts.push(format!("noise ±{}%", short(n)));
            }
            let flat = r.flat_fields();
            for k in salient {
                if let Some(v) = flat.get(*k) {
                    parts.push(format!("{k}={}", short(*v)));
                }
            }
            if let Some(rw) = r.reward {
                parts.push(format!("reward={}", short(rw)));
            }
            format!("window {}: {}", r.window_index, parts.join("; "))
        }
    };
    PerIterationUpdate {
        current_config: format!("{} (commit {})", current.render(set), current.commit_id),
        latest,
        trace_len: DEFAULT_TRACE_LEN,
        state,
    }
}

/// Fields a reply may carry. Update keys are limited to `fields`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSchema {
    pub fields: Vec<String>,
}

pub const RESPONSE_META_FIELDS: [&str; 4] = ["justification", "converged", "commands", "trim"];

impl ResponseSchema {
    /// Permitted update fields: the set members that are not frozen.
    pub fn for_set(set: &KnobSet, frozen: &BTreeMap<String, KnobValue>) -> Self {
        Self { fields: set.names().filter(|n| !frozen.contains_key(*n)).map(str::to_string).collect() }
    }

    pub fn permits(&self, knob: &str) -> bool {
        self.fields.iter().any(|f| f == knob)
    }

    /// JSON-schema rendering for backends with structured-output support.
    pub fn json_schema(&self) -> serde_json::Value {
        let props: serde_json::Map<String, serde_json::Value> = self
            .fields
            .iter()
            .map(|f| (f.clone(), serde_json::json!({"type": ["integer", "string", "boolean"]})))
            .collect();
        serde_json::json!({
            "type": "object",
            "properties": {
                "updates": {"type": "object", "properties": props, "additionalProperties": false},
                "justification": {"type": "string"},
                "converged": {"type": "boolean"},
                "commands": {"type": "array", "items": {"type": "string"}},
                "trim": {"type": "object"}
            },
            "required": ["updates", "justification", "converged"]
        })
    }

    pub fn descriptor(&self) -> String {
        format!(
            "Reply with one JSON object: {{\"updates\": {{<knob>: <value>}}, \"justification\": <string>, \
\"converged\": <bool>, \"commands\": [<string>]}}. Permitted update fields: {}.",
            self.fields.join(", ")
        )
    }
}

fn request_text(kind: RequestKind) -> &'static str {
    match kind {
        RequestKind::Instant => "Instant step: propose at most a small local change for the next window.",
        RequestKind::Reasoning => {
            "Reasoning step: review the trace, revise the strategy, and propose a change only if the evidence supports it."
        }
        RequestKind::Trim => {
            "Trim step: narrow knob ranges around promising regions and freeze low-impact knobs. Add a \"trim\" \
object {\"narrow\": {<knob>: [<lo>, <hi>]}, \"freeze\": {<knob>: <value>}}."
        }
        RequestKind::SynthesizePrior => "Summarize the prior runs below into a short reusable prior.",
    }
}

/// Renders the full prompt. Pure: identical arguments give identical text.
pub fn render_prompt(
    spec: &SessionSpecification,
    update: &PerIterationUpdate,
    context: &[ContextEntry],
    schema: &ResponseSchema,
) -> (String, ResponseSchema) {
    let mut out = spec.render();
    let _ = writeln!(out, "## Config\n{}\n", update.current_config);
    let _ = writeln!(out, "## Latest\n{}\n", update.latest);
    let _ = writeln!(out, "## Trace");
    let skip = context.len().saturating_sub(update.trace_len);
    for e in &context[skip..] {
        let _ = writeln!(out, "- {}", e.render());
    }
    let _ = writeln!(out, "\n## Request\n{}\n{}", request_text(update.state.request), schema.descriptor());
    let _ = writeln!(out, "State: {}", serde_json::to_string(&update.state).expect("state serializes"));
    (out, schema.clone())
}
