//! Non-LLM tuners behind the downstream-tuner contract: standalone
//! comparison baselines and the optimizer slot after trimming.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::registry::{KnobKind, KnobSet, KnobSpec, KnobValue, ValueRange};
use crate::telemetry::Direction;

type Assign = BTreeMap<String, KnobValue>;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("tuner not initialized")]
    Uninitialized,
    #[error("unknown tuner `{0}`")]
    Unknown(String),
    #[error("subprocess: {0}")]
    Subprocess(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub config: Assign,
    pub reward: f64,
}

/// Contract for optimizers that drive tuning windows without a model.
/// Proposals carry only changed knobs; the guardrail re-validates them.
pub trait DownstreamTuner: Send {
    fn name(&self) -> &str;

    fn init(&mut self, set: &KnobSet, direction: Direction, seed: u64) -> Result<(), BaselineError>;

    /// Next updates relative to `current`, given every (config, reward)
    /// observed so far, oldest first.
    fn propose(&mut self, history: &[HistoryEntry], current: &Assign) -> Result<Assign, BaselineError>;

    fn observe(&mut self, _config: &Assign, _reward: f64) {}
}

pub fn by_name(name: &str) -> Result<Box<dyn DownstreamTuner>, BaselineError> {
    match name {
        "random" | "random_search" => Ok(Box::new(RandomSearch::default())),
        "hill_climb" | "hillclimb" => Ok(Box::new(HillClimb::default())),
        "noop" => Ok(Box::new(NoopTuner)),
        other => match other.strip_prefix("subprocess:") {
            Some(cmd) => Ok(Box::new(SubprocessTuner::new(cmd))),
            None => Err(BaselineError::Unknown(other.to_string())),
        },
    }
}

fn diff(current: &Assign, target: &Assign) -> Assign {
    target.iter().filter(|(k, v)| current.get(*k) != Some(*v)).map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Legal ordinals of a knob within its active range, in ascending order.
fn first_legal(spec: &KnobSpec, range: &ValueRange) -> Option<i64> {
    let o = spec.snap_into(range.lo, range)?;
    Some(if o < range.lo { o + spec.kind.ordinal_step() } else { o })
}

fn better(direction: Direction, a: f64, b: f64) -> bool {
    direction.better(a, b)
}

/// Uniform stepped sampling inside the active ranges. Samples violating an
/// ordering rule are redrawn (up to a bound) so windows are not wasted on
/// proposals the guardrail would reject.
#[derive(Default)]
pub struct RandomSearch {
    set: Option<KnobSet>,
    rng: Option<ChaCha8Rng>,
}

impl RandomSearch {
    fn sample(&mut self) -> Result<Assign, BaselineError> {
        let set = self.set.as_ref().ok_or(BaselineError::Uninitialized)?;
        let rng = self.rng.as_mut().ok_or(BaselineError::Uninitialized)?;
        let mut out = Assign::new();
        for (spec, range) in set.active_ranges() {
            let count = spec.count_in(&range);
            let Some(first) = first_legal(spec, &range) else { continue };
            let o = first + rng.random_range(0..count.max(1)) * spec.kind.ordinal_step();
            out.insert(spec.name.clone(), spec.from_ordinal(o));
        }
        Ok(out)
    }
}

impl DownstreamTuner for RandomSearch {
    fn name(&self) -> &str {
        "random"
    }

    fn init(&mut self, set: &KnobSet, _direction: Direction, seed: u64) -> Result<(), BaselineError> {
        self.set = Some(set.clone());
        self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        Ok(())
    }

    fn propose(&mut self, _history: &[HistoryEntry], current: &Assign) -> Result<Assign, BaselineError> {
        let mut s = self.sample()?;
        for _ in 0..256 {
            if self.set.as_ref().unwrap().satisfies_ordering(&s) {
                break;
            }
            s = self.sample()?;
        }
        Ok(diff(current, &s))
    }
}

pub const DEFAULT_DIVISIONS: i64 = 16;

/// Coordinate hill-climb: cycles knobs in set order, stepping one
/// step-unit up or down from the best config so far. An improvement keeps
/// the same knob and direction; anything else (ties included) keeps the
/// incumbent and moves on. The step-unit is `span / divisions` of the
/// active range, rounded onto the knob's grid, so narrowing a range also
/// refines the steps.
pub struct HillClimb {
    divisions: i64,
    set: Option<KnobSet>,
    direction: Direction,
    best: Option<(Assign, f64)>,
    cursor: usize,
    signs: Vec<i64>,
    pending: Option<Assign>,
}

impl Default for HillClimb {
    fn default() -> Self {
        Self::new(DEFAULT_DIVISIONS)
    }
}

impl HillClimb {
    pub fn new(divisions: i64) -> Self {
        Self {
            divisions: divisions.max(1),
            set: None,
            direction: Direction::Min,
            best: None,
            cursor: 0,
            signs: Vec::new(),
            pending: None,
        }
    }

    pub fn best(&self) -> Option<&(Assign, f64)> {
        self.best.as_ref()
    }

    fn unit(&self, spec: &KnobSpec, range: &ValueRange) -> i64 {
        let step = spec.kind.ordinal_step();
        let raw = (range.hi - range.lo) / self.divisions;
        (raw / step).max(1) * step
    }

    /// Cursor positions are (knob, sign) pairs: 2·i for the seeded first
    /// direction of knob i, 2·i+1 for the other.
    fn probe_at(&self, set: &KnobSet, best: &Assign, pos: usize) -> Option<Assign> {
        let (spec, range) = set.active_ranges().nth(pos / 2)?;
        let sign = if pos % 2 == 0 { self.signs[pos / 2] } else { -self.signs[pos / 2] };
        let x = spec.ordinal(best.get(&spec.name)?)?;
        let target = (x + sign * self.unit(spec, &range)).clamp(range.lo, range.hi);
        let o = spec.snap_into(target, &range)?;
        let o = if sign > 0 && o < target && o + spec.kind.ordinal_step() <= range.hi { o + spec.kind.ordinal_step() } else { o };
        if o == x || !range.contains(o) {
            return None;
        }
        let mut cfg = best.clone();
        cfg.insert(spec.name.clone(), spec.from_ordinal(o));
        set.satisfies_ordering(&cfg).then_some(cfg)
    }
}

impl DownstreamTuner for HillClimb {
    fn name(&self) -> &str {
        "hill_climb"
    }

    fn init(&mut self, set: &KnobSet, direction: Direction, seed: u64) -> Result<(), BaselineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.signs = (0..set.len()).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        self.set = Some(set.clone());
        self.direction = direction;
        self.best = None;
        self.cursor = 0;
        self.pending = None;
        Ok(())
    }

    fn propose(&mut self, history: &[HistoryEntry], current: &Assign) -> Result<Assign, BaselineError> {
        let set = self.set.clone().ok_or(BaselineError::Uninitialized)?;
        let Some(last) = history.last() else { return Ok(Assign::new()) };
        let mine: Assign = set.names().filter_map(|n| last.config.get(n).map(|v| (n.to_string(), v.clone()))).collect();
        match (&self.best, self.pending.take()) {
            (None, _) => self.best = Some((mine, last.reward)),
            (Some((_, b)), Some(p)) if p == mine => {
                if better(self.direction, last.reward, *b) {
                    self.best = Some((mine, last.reward));
                } else {
                    self.cursor += 1;
                }
            }
            // the probe was not what got measured (rejected or overridden)
            (Some(_), Some(_)) => self.cursor += 1,
            (Some(_), None) => {}
        }
        let best = self.best.as_ref().unwrap().0.clone();
        let slots = 2 * set.len();
        for _ in 0..slots {
            let pos = self.cursor % slots;
            if let Some(cfg) = self.probe_at(&set, &best, pos) {
                self.pending = Some(cfg.clone());
                return Ok(diff(current, &cfg));
            }
            self.cursor += 1;
        }
        // nowhere to go: hold the best
        Ok(diff(current, &best))
    }
}

/// Never proposes anything.
pub struct NoopTuner;

impl DownstreamTuner for NoopTuner {
    fn name(&self) -> &str {
        "noop"
    }

    fn init(&mut self, _set: &KnobSet, _direction: Direction, _seed: u64) -> Result<(), BaselineError> {
        Ok(())
    }

    fn propose(&mut self, _history: &[HistoryEntry], _current: &Assign) -> Result<Assign, BaselineError> {
        Ok(Assign::new())
    }
}

/// Out-of-process optimizer speaking line-delimited JSON on stdin/stdout.
///
/// Requests: `{"op":"init","knobs":[...],"direction":..,"seed":..}`,
/// `{"op":"propose","history":[{"config":..,"reward":..}],"current":{..}}`,
/// `{"op":"observe","config":{..},"reward":..}`. Every request gets one
/// reply line; propose replies carry `{"updates":{..}}`.
pub struct SubprocessTuner {
    command: String,
    child: Option<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl SubprocessTuner {
    pub fn new(command: &str) -> Self {
        Self { command: command.to_string(), child: None }
    }

    fn call(&mut self, request: serde_json::Value) -> Result<serde_json::Value, BaselineError> {
        let (_, stdin, stdout) = self.child.as_mut().ok_or(BaselineError::Uninitialized)?;
        writeln!(stdin, "{request}").and_then(|_| stdin.flush()).map_err(|e| BaselineError::Subprocess(e.to_string()))?;
        let mut line = String::new();
        let n = stdout.read_line(&mut line).map_err(|e| BaselineError::Subprocess(e.to_string()))?;
        if n == 0 {
            return Err(BaselineError::Subprocess("optimizer closed its output".into()));
        }
        serde_json::from_str(&line).map_err(|e| BaselineError::Subprocess(format!("bad reply {line:?}: {e}")))
    }
}

fn knob_descriptor(spec: &KnobSpec, range: &ValueRange) -> serde_json::Value {
    match &spec.kind {
        KnobKind::Int { step, .. } => json!({"name": spec.name, "kind": "int", "lo": range.lo, "hi": range.hi, "step": step}),
        KnobKind::Enum { values } => json!({
            "name": spec.name, "kind": "enum", "values": values[range.lo as usize..=range.hi as usize],
        }),
        KnobKind::Bool => json!({"name": spec.name, "kind": "bool", "lo": range.lo, "hi": range.hi}),
    }
}

impl DownstreamTuner for SubprocessTuner {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn init(&mut self, set: &KnobSet, direction: Direction, seed: u64) -> Result<(), BaselineError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| BaselineError::Subprocess(format!("{}: {e}", self.command)))?;
        let stdin = child.stdin.take().unwrap();
        let stdout = BufReader::new(child.stdout.take().unwrap());
        self.child = Some((child, stdin, stdout));
        let knobs: Vec<_> = set.active_ranges().map(|(s, r)| knob_descriptor(s, &r)).collect();
        self.call(json!({"op": "init", "knobs": knobs, "direction": direction, "seed": seed}))?;
        Ok(())
    }

    fn propose(&mut self, history: &[HistoryEntry], current: &Assign) -> Result<Assign, BaselineError> {
        let reply = self.call(json!({"op": "propose", "history": history, "current": current}))?;
        let updates = reply.get("updates").cloned().unwrap_or(json!({}));
        serde_json::from_value(updates).map_err(|e| BaselineError::Subprocess(format!("bad updates: {e}")))
    }

    fn observe(&mut self, config: &Assign, reward: f64) {
        let _ = self.call(json!({"op": "observe", "config": config, "reward": reward}));
    }
}

impl Drop for SubprocessTuner {
    fn drop(&mut self) {
        if let Some((mut child, stdin, _)) = self.child.take() {
            drop(stdin);
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Registry;
    use crate::sim::{load_surface, ResponseSurface};

    fn set(spec: &str) -> KnobSet {
        Registry::builtin().resolve_set_spec(spec).unwrap()
    }

    #[test]
    fn random_search_is_seeded_and_in_range() {
        let mut s = set("default");
        let current = s.default_configuration().unwrap().assignments;
        s.set_active_range("latency_ns", ValueRange::new(5_000_000, 9_000_000)).unwrap();
        let run = |seed| {
            let mut t = RandomSearch::default();
            t.init(&s, Direction::Min, seed).unwrap();
            (0..50).map(|_| t.propose(&[], &current).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let mut t = RandomSearch::default();
        t.init(&s, Direction::Min, 9).unwrap();
        for _ in 0..1000 {
            let p = t.propose(&[], &current).unwrap();
            if let Some(v) = p.get("latency_ns") {
                assert!(s.in_active_range("latency_ns", v), "{v}");
            }
            if let Some(KnobValue::Token(c)) = p.get("cstate_max") {
                assert!(["C0", "C1", "C1E", "C3", "C6"].contains(&c.as_str()));
            }
            let mut full = current.clone();
            full.extend(p);
            assert!(s.satisfies_ordering(&full));
        }
    }

    fn drive(t: &mut dyn DownstreamTuner, f: impl Fn(&Assign) -> f64, start: Assign, windows: usize) -> Vec<HistoryEntry> {
        let mut current = start;
        let mut history = vec![HistoryEntry { config: current.clone(), reward: f(&current) }];
        for _ in 0..windows {
            let p = t.propose(&history, &current).unwrap();
            current.extend(p);
            history.push(HistoryEntry { config: current.clone(), reward: f(&current) });
        }
        history
    }

    #[test]
    fn hill_climb_reaches_separable_optimum() {
        let reg = Registry::builtin();
        let text = r#"
name = "bowl"
knobs = ["min_perf_pct", "napi_busy_poll"]
metric = "p99_ms"
direction = "min"
base = 1.0
noise = 0.0
[[effects]]
knob = "min_perf_pct"
shape = "u"
weight = 2.0
center = 0.7
[[effects]]
knob = "napi_busy_poll"
shape = "u"
weight = 2.0
center = 0.5
"#;
        let s = ResponseSurface::parse(text).unwrap().bind(&reg).unwrap();
        let mut t = HillClimb::new(4);
        t.init(&s.set, Direction::Min, 1).unwrap();
        let start = s.set.default_configuration().unwrap().assignments;
        // per-knob budget of range/step probes (4 units each way), both knobs
        let history = drive(&mut t, |c| s.value(c), start, 2 * 2 * 4 + 4);
        let best = t.best().unwrap();
        assert_eq!(best.0["min_perf_pct"], KnobValue::Int(70));
        assert_eq!(best.0["napi_busy_poll"], KnobValue::Int(500));
        // never accepts a worse reward without noise
        let mut incumbent = history[0].reward;
        for h in &history {
            incumbent = incumbent.min(h.reward);
        }
        assert_eq!(incumbent, best.1);
    }

    #[test]
    fn hill_climb_on_flat_surface_keeps_incumbent() {
        let reg = Registry::builtin();
        let text = "name = \"flat\"\nknobs = [\"min_perf_pct\"]\nmetric = \"p99_ms\"\ndirection = \"min\"\nbase = 2.0\n";
        let s = ResponseSurface::parse(text).unwrap().bind(&reg).unwrap();
        let mut t = HillClimb::default();
        t.init(&s.set, Direction::Min, 0).unwrap();
        let start = s.set.default_configuration().unwrap().assignments;
        drive(&mut t, |c| s.value(c), start.clone(), 10);
        assert_eq!(t.best().unwrap().0, start);
    }

    #[test]
    fn hill_climb_walks_into_the_trap_lure() {
        let reg = Registry::builtin();
        let s = load_surface("trap8", &reg).unwrap();
        let mut entered = 0;
        for seed in 0..10 {
            let mut t = HillClimb::default();
            t.init(&s.set, s.direction(), seed).unwrap();
            let start = s.set.default_configuration().unwrap().assignments;
            let h = drive(&mut t, |c| s.value(c), start, 50);
            if h.iter().any(|e| s.in_trap_region(&e.config)) {
                entered += 1;
            }
        }
        assert!(entered >= 3, "{entered}");
    }

    #[test]
    fn subprocess_protocol() {
        let script = r#"while read -r line; do case "$line" in *'"propose"'*) echo '{"updates": {"min_perf_pct": 42}}';; *) echo '{"ok": true}';; esac; done"#;
        let s = set("default");
        let mut t = SubprocessTuner::new(script);
        t.init(&s, Direction::Min, 1).unwrap();
        let cur = s.default_configuration().unwrap().assignments;
        let p = t.propose(&[HistoryEntry { config: cur.clone(), reward: 1.0 }], &cur).unwrap();
        assert_eq!(p["min_perf_pct"], KnobValue::Int(42));
        t.observe(&cur, 1.0);
        assert!(by_name("nope").is_err());
    }
}
