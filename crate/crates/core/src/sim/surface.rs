//! Configurable response surfaces mapping knob configurations to an
//! application metric.
//!
//! Every knob value is normalized to `x` in [0, 1] over its declared domain.
//! The surface multiplies per-knob cost factors and pairwise coupling
//! factors into a cost `m(config) >= 0`:
//!
//! * `u`: `1 + w (x - c)^2`
//! * `increasing`: `1 + w x`
//! * `decreasing`: `1 + w (1 - x)`
//! * `flat`: `1`
//! * coupling: `exp(w (x_a - c_a)(x_b - c_b))`, with `c` the knobs' effect
//!   centers (0.5 when the knob has no `u` effect)
//!
//! Latency surfaces report `base * m`, throughput surfaces `base / m`.
//! While the trap is active the metric is degraded by `severity`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{Configuration, KnobSet, KnobSpec, KnobValue, Registry, RegistryError};
use crate::telemetry::Direction;

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("surface parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("surface references knob `{0}` outside its knob list")]
    ForeignKnob(String),
    #[error("invalid value {value} for `{knob}`")]
    BadValue { knob: String, value: String },
    #[error("declared optimum is beaten by a probed config ({probe} vs {optimum})")]
    OptimumNotOptimal { optimum: f64, probe: f64 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    U,
    Increasing,
    Decreasing,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub knob: String,
    pub shape: Shape,
    #[serde(default)]
    pub weight: f64,
    /// Normalized position of the minimum, for `u` shapes.
    #[serde(default = "half")]
    pub center: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl CompareOp {
    pub fn holds(self, a: i64, b: i64) -> bool {
        match self {
            CompareOp::Lt => a < b,
            CompareOp::Le => a <= b,
            CompareOp::Eq => a == b,
            CompareOp::Ge => a >= b,
            CompareOp::Gt => a > b,
        }
    }
}

/// `knob op value`, compared in ordinal space (enumerations by position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub knob: String,
    pub op: CompareOp,
    pub value: KnobValue,
}

impl Condition {
    pub fn holds(&self, set: &KnobSet, assignments: &BTreeMap<String, KnobValue>) -> bool {
        let Some(spec) = set.get(&self.knob) else { return false };
        match (assignments.get(&self.knob).and_then(|v| spec.ordinal(v)), spec.ordinal(&self.value)) {
            (Some(a), Some(b)) => self.op.holds(a, b),
            _ => false,
        }
    }
}

/// Conjunction of conditions.
pub fn region_holds(conditions: &[Condition], set: &KnobSet, assignments: &BTreeMap<String, KnobValue>) -> bool {
    !conditions.is_empty() && conditions.iter().all(|c| c.holds(set, assignments))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trap {
    pub when: Vec<Condition>,
    #[serde(default = "default_severity")]
    pub severity: f64,
    #[serde(default = "default_recovery")]
    pub recovery_windows: u32,
}

fn default_severity() -> f64 {
    500.0
}

fn default_recovery() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpcBias {
    pub knob: String,
    pub weight: f64,
}

/// `ipc = base * perf_ratio^sensitivity * prod(1 + w_k x_k)`, where
/// `perf_ratio = m(default) / m(config)` rises as the app metric improves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpcModel {
    #[serde(default = "default_ipc_base")]
    pub base: f64,
    #[serde(default = "default_ipc_sensitivity")]
    pub sensitivity: f64,
    #[serde(default)]
    pub bias: Vec<IpcBias>,
}

fn default_ipc_base() -> f64 {
    1.5
}

fn default_ipc_sensitivity() -> f64 {
    0.5
}

impl Default for IpcModel {
    fn default() -> Self {
        Self { base: default_ipc_base(), sensitivity: default_ipc_sensitivity(), bias: Vec::new() }
    }
}

fn default_samples() -> usize {
    5
}

/// Surface definition as stored in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSurface {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub knobs: Vec<String>,
    pub metric: String,
    pub direction: Direction,
    pub base: f64,
    /// Relative standard deviation of each app sample.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_samples")]
    pub samples_per_window: usize,
    #[serde(default)]
    pub effects: Vec<Effect>,
    #[serde(default)]
    pub couplings: Vec<Coupling>,
    #[serde(default)]
    pub trap: Option<Trap>,
    #[serde(default)]
    pub ipc: IpcModel,
    /// Annotated noise-free optimum, verified when the surface is bound.
    #[serde(default)]
    pub optimum: Option<BTreeMap<String, KnobValue>>,
}

impl ResponseSurface {
    pub fn parse(text: &str) -> Result<Self, SurfaceError> {
        toml::from_str(text).map_err(|e| SurfaceError::Parse(e.message().to_string()))
    }

    pub fn to_document(&self) -> String {
        toml::to_string(self).expect("surface serializes")
    }

    pub fn bind(self, registry: &Registry) -> Result<BoundSurface, SurfaceError> {
        BoundSurface::new(self, registry)
    }
}

/// A surface resolved against the knob catalog.
#[derive(Debug, Clone)]
pub struct BoundSurface {
    pub surface: ResponseSurface,
    pub set: KnobSet,
    factors: Vec<KnobFactor>,
    couplings: Vec<(usize, usize, f64)>,
    ipc_bias: Vec<(usize, f64)>,
    default_cost: f64,
    /// Catalog entries of the knobs that drive synthetic system metrics,
    /// used at their defaults when not part of the surface.
    ambient: BTreeMap<String, KnobSpec>,
}

/// Knobs read by the system-metric synthesis.
pub const AMBIENT_KNOBS: [&str; 4] = ["min_perf_pct", "max_perf_pct", "napi_busy_poll", "cstate_max"];

#[derive(Debug, Clone)]
struct KnobFactor {
    shape: Shape,
    weight: f64,
    center: f64,
}

impl BoundSurface {
    fn new(surface: ResponseSurface, registry: &Registry) -> Result<Self, SurfaceError> {
        if surface.base <= 0.0 || !surface.base.is_finite() {
            return Err(SurfaceError::Invalid("base must be positive".into()));
        }
        if surface.samples_per_window == 0 {
            return Err(SurfaceError::Invalid("samples_per_window must be positive".into()));
        }
        let set = registry.resolve_tunable_set(&surface.knobs)?;
        let pos = |k: &str| set.position(k).ok_or_else(|| SurfaceError::ForeignKnob(k.to_string()));
        let mut factors = vec![KnobFactor { shape: Shape::Flat, weight: 0.0, center: 0.5 }; set.len()];
        for e in &surface.effects {
            let i = pos(&e.knob)?;
            if e.weight < 0.0 {
                return Err(SurfaceError::Invalid(format!("negative weight on `{}`", e.knob)));
            }
            factors[i] = KnobFactor { shape: e.shape, weight: e.weight, center: e.center };
        }
        let mut couplings = Vec::new();
        for c in &surface.couplings {
            couplings.push((pos(&c.a)?, pos(&c.b)?, c.weight));
        }
        let mut ipc_bias = Vec::new();
        for b in &surface.ipc.bias {
            ipc_bias.push((pos(&b.knob)?, b.weight));
        }
        if let Some(trap) = &surface.trap {
            for c in &trap.when {
                let spec = set.get(&c.knob).ok_or_else(|| SurfaceError::ForeignKnob(c.knob.clone()))?;
                if spec.ordinal(&c.value).is_none() {
                    return Err(SurfaceError::BadValue { knob: c.knob.clone(), value: c.value.to_string() });
                }
            }
            if trap.severity < 1.0 {
                return Err(SurfaceError::Invalid("trap severity must be >= 1".into()));
            }
        }
        let ambient = AMBIENT_KNOBS
            .iter()
            .filter_map(|k| registry.get(k).map(|spec| (k.to_string(), spec.clone())))
            .collect();
        let mut bound = Self { surface, set, factors, couplings, ipc_bias, default_cost: 1.0, ambient };
        let defaults = bound.set.default_configuration()?;
        bound.default_cost = bound.cost(&defaults.assignments);
        if let Some(opt) = bound.surface.optimum.clone() {
            for (k, v) in &opt {
                let spec = bound.set.get(k).ok_or_else(|| SurfaceError::ForeignKnob(k.clone()))?;
                if spec.ordinal(v).is_none() {
                    return Err(SurfaceError::BadValue { knob: k.clone(), value: v.to_string() });
                }
            }
            bound.verify_optimum(&opt)?;
        }
        Ok(bound)
    }

    pub fn name(&self) -> &str {
        &self.surface.name
    }

    pub fn direction(&self) -> Direction {
        self.surface.direction
    }

    fn normalized(spec: &KnobSpec, value: &KnobValue) -> f64 {
        let range = spec.declared_range();
        let o = spec.ordinal(value).unwrap_or(range.lo);
        if range.hi == range.lo {
            0.0
        } else {
            (o - range.lo) as f64 / (range.hi - range.lo) as f64
        }
    }

    /// Normalized positions of the surface knobs, in set order. Missing
    /// knobs read as their defaults.
    pub fn positions(&self, assignments: &BTreeMap<String, KnobValue>) -> Vec<f64> {
        self.set
            .members()
            .iter()
            .map(|spec| Self::normalized(spec, assignments.get(&spec.name).unwrap_or(&spec.default)))
            .collect()
    }

    /// Noise-free, trap-free cost multiplier.
    pub fn cost(&self, assignments: &BTreeMap<String, KnobValue>) -> f64 {
        let x = self.positions(assignments);
        let mut m = 1.0;
        for (f, xi) in self.factors.iter().zip(&x) {
            m *= match f.shape {
                Shape::U => 1.0 + f.weight * (xi - f.center).powi(2),
                Shape::Increasing => 1.0 + f.weight * xi,
                Shape::Decreasing => 1.0 + f.weight * (1.0 - xi),
                Shape::Flat => 1.0,
            };
        }
        for &(a, b, w) in &self.couplings {
            let ca = if self.factors[a].shape == Shape::U { self.factors[a].center } else { 0.5 };
            let cb = if self.factors[b].shape == Shape::U { self.factors[b].center } else { 0.5 };
            m *= (w * (x[a] - ca) * (x[b] - cb)).exp();
        }
        m
    }

    pub fn in_trap_region(&self, assignments: &BTreeMap<String, KnobValue>) -> bool {
        self.surface.trap.as_ref().is_some_and(|t| region_holds(&t.when, &self.set, assignments))
    }

    /// App metric for a given cost and trap state, without noise.
    pub fn metric_for(&self, cost: f64, trapped: bool) -> f64 {
        let severity = match (&self.surface.trap, trapped) {
            (Some(t), true) => t.severity,
            _ => 1.0,
        };
        match self.surface.direction {
            Direction::Min => self.surface.base * cost * severity,
            Direction::Max => self.surface.base / cost / severity,
        }
    }

    /// Noise-free metric, treating configs inside the trap region as trapped.
    pub fn value(&self, assignments: &BTreeMap<String, KnobValue>) -> f64 {
        self.metric_for(self.cost(assignments), self.in_trap_region(assignments))
    }

    pub fn default_value(&self) -> f64 {
        self.metric_for(self.default_cost, false)
    }

    /// `m(default) / m(config)`: above 1 when the config beats the default.
    pub fn perf_ratio(&self, cost: f64) -> f64 {
        self.default_cost / cost
    }

    /// Noise-free IPC synthesized for a config.
    pub fn ipc(&self, assignments: &BTreeMap<String, KnobValue>, trapped: bool) -> f64 {
        let x = self.positions(assignments);
        let mut cost = self.cost(assignments);
        if trapped {
            cost *= self.surface.trap.as_ref().map_or(1.0, |t| t.severity);
        }
        let mut ipc = self.surface.ipc.base * self.perf_ratio(cost).powf(self.surface.ipc.sensitivity);
        for &(i, w) in &self.ipc_bias {
            ipc *= 1.0 + w * x[i];
        }
        ipc
    }

    fn verify_optimum(&self, optimum: &BTreeMap<String, KnobValue>) -> Result<(), SurfaceError> {
        let mut full = self.set.default_configuration()?.assignments;
        full.extend(optimum.clone());
        let best = self.value(&full);
        let dir = self.surface.direction;
        let tol = 1e-9 * best.abs().max(1.0);
        let beaten = |probe: f64| match dir {
            Direction::Min => probe < best - tol,
            Direction::Max => probe > best + tol,
        };
        for probe in self.dense_probes(&full) {
            if !self.set.satisfies_ordering(&probe) {
                continue;
            }
            let v = self.value(&probe);
            if beaten(v) {
                return Err(SurfaceError::OptimumNotOptimal { optimum: best, probe: v });
            }
        }
        Ok(())
    }

    /// Deterministic probe set: every single-knob neighbour of `center` on
    /// a 21-point grid plus 2000 pseudo-random configs.
    fn dense_probes(&self, center: &BTreeMap<String, KnobValue>) -> Vec<BTreeMap<String, KnobValue>> {
        let mut probes = Vec::new();
        for spec in self.set.members() {
            for v in grid_values(spec, 21) {
                let mut p = center.clone();
                p.insert(spec.name.clone(), v);
                probes.push(p);
            }
        }
        let mut rng = XorShift(0x9e37_79b9_7f4a_7c15);
        for _ in 0..2000 {
            let mut p = BTreeMap::new();
            for spec in self.set.members() {
                let r = spec.declared_range();
                let count = spec.count_in(&r) as u64;
                let o = r.lo + (rng.next() % count) as i64 * spec.kind.ordinal_step();
                p.insert(spec.name.clone(), spec.from_ordinal(o));
            }
            probes.push(p);
        }
        probes
    }

    /// Noise-free optimum of the app metric over the discretized space.
    /// Configs violating the set's ordering rules are never candidates.
    ///
    /// The space is discretized to the largest per-knob grid (at most `grid`
    /// values) whose product fits in `budget`, and enumerated. When even a
    /// two-point grid does not fit, coordinate descent over `grid` values
    /// per knob runs from the default, the grid center and 16 pseudo-random
    /// grid points. The result is then refined by coordinate line search over
    /// every legal value (at most 2001 per knob).
    pub fn oracle_optimum(&self, grid: usize, budget: u64) -> (Configuration, f64) {
        self.optimize(|c| self.value(c), self.surface.direction, grid, budget)
    }

    /// Noise-free argmax of the synthesized IPC, i.e. where a tuner chasing
    /// the IPC proxy ends up.
    pub fn ipc_optimum(&self, grid: usize, budget: u64) -> (Configuration, f64) {
        self.optimize(|c| self.ipc(c, self.in_trap_region(c)), Direction::Max, grid, budget)
    }

    fn optimize(
        &self,
        objective: impl Fn(&BTreeMap<String, KnobValue>) -> f64,
        dir: Direction,
        grid: usize,
        budget: u64,
    ) -> (Configuration, f64) {
        let feasible = |c: &BTreeMap<String, KnobValue>| self.set.satisfies_ordering(c);
        let names: Vec<String> = self.set.names().map(str::to_string).collect();
        // largest per-knob grid (<= `grid`) whose full product fits the budget
        let mut g = grid.max(2);
        while g > 2 && (g as f64).powi(names.len() as i32) > budget as f64 {
            g -= 1;
        }
        let candidates: Vec<Vec<KnobValue>> = self.set.members().iter().map(|s| grid_values(s, g)).collect();
        let total: u64 = candidates
            .iter()
            .map(|c| c.len() as u64)
            .try_fold(1u64, |acc, n| acc.checked_mul(n))
            .unwrap_or(u64::MAX);

        let defaults = self.set.default_configuration().expect("surface defaults are valid").assignments;
        let mut best_cfg = defaults.clone();
        let mut best = objective(&best_cfg);

        if total <= budget {
            let mut idx = vec![0usize; names.len()];
            'outer: loop {
                let cfg: BTreeMap<String, KnobValue> = names
                    .iter()
                    .zip(&idx)
                    .enumerate()
                    .map(|(k, (n, &i))| (n.clone(), candidates[k][i].clone()))
                    .collect();
                if feasible(&cfg) {
                    let v = objective(&cfg);
                    if dir.better(v, best) {
                        best = v;
                        best_cfg = cfg;
                    }
                }
                for k in 0..idx.len() {
                    idx[k] += 1;
                    if idx[k] < candidates[k].len() {
                        continue 'outer;
                    }
                    idx[k] = 0;
                }
                break;
            }
        } else {
            // multi-start coordinate descent: default, grid center and
            // pseudo-random grid points
            let mut starts = vec![defaults.clone()];
            starts.push(names.iter().zip(&candidates).map(|(n, c)| (n.clone(), c[c.len() / 2].clone())).collect());
            let mut rng = XorShift(0x2545_f491_4f6c_dd1d);
            for _ in 0..16 {
                starts.push(
                    names.iter().zip(&candidates).map(|(n, c)| (n.clone(), c[rng.below(c.len())].clone())).collect(),
                );
            }
            let per_knob: Vec<Vec<KnobValue>> = self.set.members().iter().map(|s| grid_values(s, grid)).collect();
            for start in starts.into_iter().filter(|s| feasible(s)) {
                let (cfg, v) = self.coordinate_descent(start, &per_knob, &objective, dir);
                if dir.better(v, best) {
                    best = v;
                    best_cfg = cfg;
                }
            }
        }
        let fine: Vec<Vec<KnobValue>> = self.set.members().iter().map(|s| grid_values(s, 2001)).collect();
        let (cfg, v) = self.coordinate_descent(best_cfg.clone(), &fine, &objective, dir);
        if dir.better(v, best) {
            best = v;
            best_cfg = cfg;
        }
        (Configuration { assignments: best_cfg, commit_id: 0, timestamp: 0.0 }, best)
    }

    fn coordinate_descent(
        &self,
        mut cfg: BTreeMap<String, KnobValue>,
        candidates: &[Vec<KnobValue>],
        objective: &impl Fn(&BTreeMap<String, KnobValue>) -> f64,
        dir: Direction,
    ) -> (BTreeMap<String, KnobValue>, f64) {
        let mut best = objective(&cfg);
        for _ in 0..50 {
            let mut improved = false;
            for (spec, values) in self.set.members().iter().zip(candidates) {
                for v in values {
                    let old = cfg.insert(spec.name.clone(), v.clone()).expect("knob present");
                    let val = if self.set.satisfies_ordering(&cfg) { objective(&cfg) } else { f64::NAN };
                    if !val.is_nan() && dir.better(val, best) {
                        best = val;
                        improved = true;
                    } else {
                        cfg.insert(spec.name.clone(), old);
                    }
                }
            }
            if !improved {
                break;
            }
        }
        (cfg, best)
    }

    /// Value of an ambient knob: from `assignments` when present, else the
    /// catalog default. Returned normalized to [0, 1] and as an ordinal.
    pub(crate) fn ambient(&self, name: &str, assignments: &BTreeMap<String, KnobValue>) -> Option<(f64, i64)> {
        let spec = self.ambient.get(name)?;
        let v = assignments.get(name).unwrap_or(&spec.default);
        let o = spec.ordinal(v).unwrap_or_else(|| spec.ordinal(&spec.default).unwrap_or(0));
        Some((Self::normalized(spec, v), o))
    }

    pub(crate) fn ambient_spec(&self, name: &str) -> Option<&KnobSpec> {
        self.ambient.get(name)
    }
}

struct XorShift(u64);

impl XorShift {
    fn next(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }
}

/// Up to `n` legal values spread evenly over the declared domain,
/// endpoints included.
pub fn grid_values(spec: &KnobSpec, n: usize) -> Vec<KnobValue> {
    let range = spec.declared_range();
    let count = spec.count_in(&range);
    let step = spec.kind.ordinal_step();
    if count as usize <= n || n < 2 {
        return (0..count).map(|i| spec.from_ordinal(range.lo + i * step)).collect();
    }
    let mut out: Vec<KnobValue> = Vec::with_capacity(n);
    for i in 0..n {
        let k = ((count - 1) as f64 * i as f64 / (n - 1) as f64).round() as i64;
        let v = spec.from_ordinal(range.lo + k * step);
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out
}
