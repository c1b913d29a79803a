//! Rule-driven stand-in for a language model, used by the scripted backend.
//!
//! The engine reads the `State:` line of each prompt and answers like a
//! cautious tuner: it sweeps knobs one at a time, fits a parabola through
//! three measurements per knob, never proposes a config inside a declared
//! avoid region, and settles on the best measured config before the tuning
//! budget runs out. Script authors encode domain knowledge through the
//! avoid regions, the freeze list and the text fields.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::{PromptState, RequestKind, ResponseSchema};
use crate::registry::{KnobSet, KnobSpec, KnobValue, Registry, ValueRange};
use crate::sim::{region_holds, Condition};
use crate::telemetry::Direction;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningStyle {
    /// Strategy text only; proposes the best config when the latest window
    /// collapsed.
    #[default]
    Advise,
    /// Runs the same search as the instant role (single-loop reasoning).
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimPolicy {
    /// Half-width of narrowed ranges as a fraction of the current span.
    pub width: f64,
    /// Knobs frozen at their incumbent value regardless of evidence.
    pub freeze: Vec<String>,
    /// Also freeze knobs whose probes moved the reward less than the margin.
    pub freeze_insensitive: bool,
    /// Freeze knobs already swept and fitted at their fitted value instead
    /// of narrowing them, leaving the budget for unexplored knobs.
    pub freeze_fitted: bool,
    /// Ranges to narrow unexplored knobs to, as `[lo, hi]`.
    pub narrow: BTreeMap<String, (KnobValue, KnobValue)>,
}

impl Default for TrimPolicy {
    fn default() -> Self {
        Self { width: 0.2, freeze: Vec::new(), freeze_insensitive: true, freeze_fitted: true, narrow: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Regions never proposed; each is a conjunction of conditions.
    pub avoid: Vec<Vec<Condition>>,
    /// Probe distance as a fraction of the active span.
    pub delta: f64,
    /// Relative reward change treated as noise.
    pub noise_margin: f64,
    /// Windows before the end of tuning at which the engine settles.
    pub finalize_margin: u64,
    pub reasoning: ReasoningStyle,
    /// Latest/best reward ratio that triggers a reasoning recovery.
    pub recovery_ratio: f64,
    pub strategy: String,
    pub prior_summary: String,
    pub trim: TrimPolicy,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            avoid: Vec::new(),
            delta: 0.4,
            noise_margin: 0.02,
            finalize_margin: 4,
            reasoning: ReasoningStyle::Advise,
            recovery_ratio: 5.0,
            strategy: "sweep one knob at a time, fit the response, keep the best measured config".into(),
            prior_summary: "no reusable prior".into(),
            trim: TrimPolicy::default(),
        }
    }
}

type Assign = BTreeMap<String, KnobValue>;

#[derive(Debug, Clone)]
struct Pending {
    config: Assign,
    knob: Option<String>,
    issued: u64,
}

#[derive(Debug, Clone, Default)]
struct Sweep {
    index: usize,
    /// (ordinal, goodness) along the current knob, base included.
    points: Vec<(i64, f64)>,
    delta: f64,
}

pub struct PolicyEngine {
    config: PolicyConfig,
    registry: Registry,
    avoid_set: Option<KnobSet>,
    rng: ChaCha8Rng,
    observations: Vec<(Assign, f64)>,
    last_window: Option<u64>,
    base: Option<Assign>,
    sweep: Sweep,
    pending: Option<Pending>,
    sensitivity: BTreeMap<String, bool>,
    done: bool,
}

impl PolicyEngine {
    pub fn new(config: PolicyConfig, registry: &Registry, seed: u64) -> Self {
        let names: Vec<String> = {
            let mut v: Vec<String> = config.avoid.iter().flatten().map(|c| c.knob.clone()).collect();
            v.sort();
            v.dedup();
            v
        };
        let avoid_set = (!names.is_empty()).then(|| registry.resolve_tunable_set(&names).ok()).flatten();
        let delta = config.delta;
        Self {
            config,
            registry: registry.clone(),
            avoid_set,
            rng: ChaCha8Rng::seed_from_u64(seed),
            observations: Vec::new(),
            last_window: None,
            base: None,
            sweep: Sweep { delta, ..Sweep::default() },
            pending: None,
            sensitivity: BTreeMap::new(),
            done: false,
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// Produces the reply text for one prompt.
    pub fn reply(&mut self, reasoning: bool, prompt: &str, schema: &ResponseSchema) -> String {
        let Some(state) = PromptState::from_prompt(prompt) else {
            return json!({"updates": {}, "justification": "prompt carries no state", "converged": false}).to_string();
        };
        self.observe(&state);
        match state.request {
            RequestKind::SynthesizePrior => {
                json!({"updates": {}, "justification": self.config.prior_summary, "converged": false}).to_string()
            }
            RequestKind::Trim => self.trim_reply(&state, schema),
            _ if reasoning && self.config.reasoning == ReasoningStyle::Advise => self.advise(&state),
            _ => self.search(&state, schema),
        }
    }

    fn goodness(direction: Direction, reward: f64) -> f64 {
        // smaller is better in both directions
        match direction {
            Direction::Min => reward,
            Direction::Max => 1.0 / reward.max(1e-300),
        }
    }

    fn observe(&mut self, state: &PromptState) {
        let (Some(w), Some(r)) = (state.window, state.reward) else { return };
        if self.last_window.is_some_and(|l| l >= w) {
            return;
        }
        self.last_window = Some(w);
        let g = Self::goodness(state.direction, r);
        self.observations.push((state.measured.clone(), g));
        if let Some(p) = &self.pending {
            if p.config == state.measured {
                let p = self.pending.take().unwrap();
                if let Some(k) = &p.knob {
                    if let Some(spec) = self.registry.get(k) {
                        if let Some(o) = p.config.get(k).and_then(|v| spec.ordinal(v)) {
                            self.sweep.points.push((o, g));
                        }
                    }
                } else {
                    // base measurement for the knob about to be swept
                    self.base = Some(p.config);
                }
            } else if w > p.issued + 2 {
                self.pending = None;
            }
        }
    }

    /// Mean goodness of an exact config, if measured.
    fn measured(&self, config: &Assign) -> Option<f64> {
        let vals: Vec<f64> = self.observations.iter().filter(|(c, _)| c == config).map(|(_, g)| *g).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    fn best(&self) -> Option<(Assign, f64)> {
        let mut best: Option<(Assign, f64)> = None;
        for (c, _) in &self.observations {
            let g = self.measured(c).unwrap();
            if best.as_ref().is_none_or(|(_, b)| g < *b) {
                best = Some((c.clone(), g));
            }
        }
        best
    }

    fn feasible(&self, config: &Assign, state: &PromptState) -> bool {
        for (a, b) in &state.ordering {
            if let (Some(KnobValue::Int(x)), Some(KnobValue::Int(y))) = (config.get(a), config.get(b)) {
                if x > y {
                    return false;
                }
            }
        }
        if let Some(set) = &self.avoid_set {
            let mut full = config.clone();
            for spec in set.members() {
                full.entry(spec.name.clone()).or_insert_with(|| spec.default.clone());
            }
            if self.config.avoid.iter().any(|region| region_holds(region, set, &full)) {
                return false;
            }
        }
        true
    }

    fn range_of(&self, state: &PromptState, knob: &str) -> Option<(KnobSpec, ValueRange)> {
        let spec = self.registry.get(knob)?.clone();
        let (lo, hi) = state.ranges.get(knob)?;
        let range = ValueRange::new(spec.ordinal(lo)?, spec.ordinal(hi)?);
        Some((spec, range))
    }

    fn diff(current: &Assign, target: &Assign) -> Assign {
        target.iter().filter(|(k, v)| current.get(*k) != Some(*v)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    fn reply_json(updates: &Assign, justification: &str, converged: bool) -> String {
        json!({"updates": updates, "justification": justification, "converged": converged}).to_string()
    }

    fn advise(&mut self, state: &PromptState) -> String {
        if let (Some(r), Some((best, bg))) = (state.reward, self.best()) {
            let g = Self::goodness(state.direction, r);
            if g > bg * self.config.recovery_ratio && best != state.current && self.feasible(&best, state) {
                let updates = Self::diff(&state.current, &best);
                return Self::reply_json(&updates, "latest window collapsed; return to the best measured config", false);
            }
        }
        Self::reply_json(&Assign::new(), &self.config.strategy, self.done)
    }

    fn propose(&mut self, state: &PromptState, config: Assign, knob: Option<String>, why: &str) -> String {
        let updates = Self::diff(&state.current, &config);
        self.pending = Some(Pending { config, knob, issued: state.window.unwrap_or(0) });
        Self::reply_json(&updates, why, false)
    }

    fn settle(&mut self, state: &PromptState) -> String {
        if self.done {
            let target = self.base.clone().unwrap_or_else(|| state.current.clone());
            let updates = Self::diff(&state.current, &target);
            let converged = updates.is_empty();
            return Self::reply_json(&updates, "hold the settled configuration", converged);
        }
        self.done = true;
        self.pending = None;
        let target = match (self.best(), self.base.as_ref().and_then(|b| self.measured(b).map(|g| (b.clone(), g)))) {
            (Some((best, bg)), Some((base, g))) => {
                if g <= bg * (1.0 + self.config.noise_margin) {
                    base
                } else {
                    best
                }
            }
            (Some((best, _)), None) => best,
            _ => state.current.clone(),
        };
        let updates = Self::diff(&state.current, &target);
        let converged = updates.is_empty();
        self.base = Some(target);
        Self::reply_json(&updates, "settle on the best measured configuration", converged)
    }

    fn search(&mut self, state: &PromptState, schema: &ResponseSchema) -> String {
        let Some(window) = state.window else {
            return Self::reply_json(&Assign::new(), "no measurement yet", false);
        };
        let finalize_at = state.tuning_windows.saturating_sub(self.config.finalize_margin);
        if self.done || window + 1 >= finalize_at {
            return self.settle(state);
        }
        if self.pending.is_some() {
            return Self::reply_json(&Assign::new(), "waiting for the last change to be measured", false);
        }
        let knobs: Vec<String> = schema.fields.iter().filter(|k| state.ranges.contains_key(*k)).cloned().collect();
        if knobs.is_empty() {
            return self.settle(state);
        }
        let base = self.base.get_or_insert_with(|| state.current.clone()).clone();
        let Some(base_g) = self.measured(&base) else {
            return self.propose(state, base, None, "re-measure the incumbent");
        };
        loop {
            if self.sweep.index >= knobs.len() {
                let left = finalize_at.saturating_sub(window + 1);
                if left >= 3 * knobs.len() as u64 + 1 {
                    self.sweep = Sweep { index: 0, points: Vec::new(), delta: self.sweep.delta * 0.35 };
                    continue;
                }
                return self.settle(state);
            }
            let knob = knobs[self.sweep.index].clone();
            let Some((spec, range)) = self.range_of(state, &knob) else {
                self.sweep.index += 1;
                continue;
            };
            let Some(x0) = base.get(&knob).and_then(|v| spec.ordinal(v)) else {
                self.sweep.index += 1;
                continue;
            };
            if !self.sweep.points.iter().any(|(o, _)| *o == x0) {
                self.sweep.points.push((x0, base_g));
            }
            let count = spec.count_in(&range);
            let wanted = 3.min(count as usize);
            if self.sweep.points.len() < wanted {
                if let Some(cand) = self.next_probe(state, &base, &spec, &range, x0) {
                    let mut cfg = base.clone();
                    cfg.insert(knob.clone(), spec.from_ordinal(cand));
                    let why = format!("probe {knob}={}", spec.from_ordinal(cand));
                    return self.propose(state, cfg, Some(knob), &why);
                }
            }
            // fit and move on
            let chosen = self.fit(state, &base, &spec, &range);
            let lo = self.sweep.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let hi = self.sweep.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let sensitive = self.sweep.points.len() > 1 && (hi - lo) / lo > 2.0 * self.config.noise_margin;
            let seen = self.sensitivity.entry(knob.clone()).or_insert(false);
            *seen |= sensitive;
            self.sweep.index += 1;
            self.sweep.points.clear();
            let mut next = base.clone();
            next.insert(knob.clone(), spec.from_ordinal(chosen));
            self.base = Some(next.clone());
            if self.measured(&next).is_none() {
                let why = format!("set {knob}={} from the fitted response", spec.from_ordinal(chosen));
                return self.propose(state, next, None, &why);
            }
            return self.search(state, schema);
        }
    }

    /// Picks the probe farthest from the points already taken (up to one
    /// probe distance), preferring to bracket the incumbent, so the fit
    /// interpolates instead of extrapolating.
    fn next_probe(&mut self, state: &PromptState, base: &Assign, spec: &KnobSpec, range: &ValueRange, x0: i64) -> Option<i64> {
        let span = (range.hi - range.lo) as f64;
        let step = spec.kind.ordinal_step();
        let d = ((self.sweep.delta * span) as i64).max(step);
        let (up, down) = (range.hi - x0, x0 - range.lo);
        let sign = if up == down {
            if self.rng.random::<bool>() { 1 } else { -1 }
        } else if up > down {
            1
        } else {
            -1
        };
        let offsets = [sign * d, -sign * d, sign * 2 * d, -sign * 2 * d, sign * d / 2, -sign * d / 2, sign * step, -sign * step];
        let mut pick: Option<(i64, i64)> = None;
        for off in offsets {
            let Some(o) = spec.snap_into(x0 + off, range) else { continue };
            if o < range.lo || o > range.hi || self.sweep.points.iter().any(|(p, _)| *p == o) {
                continue;
            }
            let mut cfg = base.clone();
            cfg.insert(spec.name.clone(), spec.from_ordinal(o));
            if !self.feasible(&cfg, state) {
                continue;
            }
            let gap = self.sweep.points.iter().map(|(p, _)| (p - o).abs()).min().unwrap_or(d);
            // a point on an empty side brackets the incumbent: worth more
            let empty_side = !self.sweep.points.iter().any(|(p, _)| (p - x0).signum() == (o - x0).signum());
            let gap = if empty_side { gap.saturating_mul(2) } else { gap }.min(d);
            if pick.is_none_or(|(_, g)| gap > g) {
                pick = Some((o, gap));
            }
        }
        pick.map(|(o, _)| o)
    }

    /// Vertex of the parabola through the sweep points when convex, else the
    /// best point; infeasible vertices fall back to the best feasible point.
    fn fit(&self, state: &PromptState, base: &Assign, spec: &KnobSpec, range: &ValueRange) -> i64 {
        let mut pts = self.sweep.points.clone();
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = pts[0].0;
        if pts.len() < 3 {
            return best;
        }
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if (hi - lo) / lo <= self.config.noise_margin {
            // flat within noise: keep the incumbent
            return base.get(&spec.name).and_then(|v| spec.ordinal(v)).unwrap_or(best);
        }
        let [(x1, y1), (x2, y2), (x3, y3)] = [pts[0], pts[1], pts[2]].map(|(x, y)| (x as f64, y));
        let denom = (x1 - x2) * (x1 - x3) * (x2 - x3);
        let a = (x3 * (y2 - y1) + x2 * (y1 - y3) + x1 * (y3 - y2)) / denom;
        let b = (x3 * x3 * (y1 - y2) + x2 * x2 * (y3 - y1) + x1 * x1 * (y2 - y3)) / denom;
        if !(a > 0.0) || !a.is_finite() {
            return best;
        }
        let v = (-b / (2.0 * a)).round().clamp(range.lo as f64, range.hi as f64) as i64;
        // nearest legal value on either side
        let step = spec.kind.ordinal_step();
        let down = spec.snap_into(v, range);
        let candidates: Vec<i64> = down.into_iter().chain(down.map(|d| d + step).filter(|u| *u <= range.hi)).collect();
        let predict = |x: f64| a * x * x + b * x;
        let mut choice = candidates.into_iter().min_by(|p, q| predict(*p as f64).total_cmp(&predict(*q as f64)));
        if let Some(c) = choice {
            let mut cfg = base.clone();
            cfg.insert(spec.name.clone(), spec.from_ordinal(c));
            if !self.feasible(&cfg, state) {
                choice = None;
            }
        }
        choice.unwrap_or(best)
    }

    fn trim_reply(&mut self, state: &PromptState, schema: &ResponseSchema) -> String {
        let base = match self.best() {
            Some((best, _)) => best,
            None => state.current.clone(),
        };
        let mut narrow = serde_json::Map::new();
        let mut freeze = serde_json::Map::new();
        for knob in &schema.fields {
            let Some((spec, range)) = self.range_of(state, knob) else { continue };
            let Some(value) = base.get(knob) else { continue };
            let probed = self.sensitivity.get(knob);
            let forced = self.config.trim.freeze.iter().any(|f| f == knob);
            let fitted = probed.is_some() && self.config.trim.freeze_fitted;
            if forced || fitted || (self.config.trim.freeze_insensitive && probed == Some(&false)) {
                freeze.insert(knob.clone(), json!(value));
                continue;
            }
            if let (None, Some((lo, hi))) = (probed, self.config.trim.narrow.get(knob)) {
                narrow.insert(knob.clone(), json!([lo, hi]));
                continue;
            }
            if probed == Some(&true) {
                let x0 = spec.ordinal(value).unwrap_or(range.lo);
                let half = ((self.config.trim.width * (range.hi - range.lo) as f64) as i64).max(spec.kind.ordinal_step());
                let lo = spec.snap_into(x0 - half, &range).unwrap_or(range.lo);
                let hi = spec.snap_into(x0 + half, &range).unwrap_or(range.hi);
                if lo < hi {
                    narrow.insert(knob.clone(), json!([spec.from_ordinal(lo), spec.from_ordinal(hi)]));
                }
            }
        }
        let updates = Self::diff(&state.current, &base);
        json!({
            "updates": updates,
            "justification": "keep fitted knobs at their best values, narrow the rest around the best config",
            "converged": false,
            "trim": {"narrow": narrow, "freeze": freeze},
        })
        .to_string()
    }
}
