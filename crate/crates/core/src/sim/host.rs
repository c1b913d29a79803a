//! Window simulation, trap dynamics and the simulated host that couples the
//! in-memory actuation backend to a response surface.
//!
//! Synthetic system metrics (fixed coefficients; `b` = busy-poll position,
//! `d` = C-state depth position, `r` = perf ratio vs. the default config):
//!
//! * `ipc`: see [`IpcModel`](super::IpcModel), times `1 + noise/2 * z`
//! * `cycles = 2.0e9 * window_s * ncpu * load`, `instructions = ipc * cycles`
//! * `cache-references = 0.02 * instructions`, miss ratio `0.3 / sqrt(r)` capped at 1
//! * `package_power_w = 15 + 0.40 max_perf_pct + 0.15 min_perf_pct + 8 b + 6 (1 - d)`
//! * `dram_power_w = 4 + 0.02 max_perf_pct`
//! * `load = 0.4 + 0.5 b`
//! * residency: idle time `(1 - load)`; a share `(1 - b)` of it is spread over
//!   the allowed states C1..cstate_max with weights `1..n`, the rest is `C0`

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::surface::BoundSurface;
use crate::actuation::{ActuationBackend, SimulatedBackend};
use crate::guardrail::knob_paths;
use crate::registry::{KnobValue, Registry};
use crate::telemetry::{
    noise_pct, reduce, AppMetrics, MeasurementRecord, RawWindow, Reducer, SystemMetrics, TelemetryError,
    TelemetrySource,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimState {
    pub in_trap: bool,
    pub consecutive_safe_windows: u32,
}

impl SimState {
    /// Advances the trap dynamics for one window spent in a config that is
    /// (or is not) inside the trigger region. Returns whether the window is
    /// trapped. The window on which the safe count reaches `recovery` is the
    /// first untrapped one.
    pub fn step(&mut self, in_region: bool, recovery: u32) -> bool {
        if in_region {
            self.in_trap = true;
            self.consecutive_safe_windows = 0;
        } else if self.in_trap {
            self.consecutive_safe_windows += 1;
            if self.consecutive_safe_windows >= recovery {
                self.in_trap = false;
                self.consecutive_safe_windows = 0;
            }
        }
        self.in_trap
    }
}

/// One simulated window before adapter parsing.
#[derive(Debug, Clone)]
pub struct SimWindow {
    pub samples: Vec<f64>,
    pub system: SystemMetrics,
    pub trapped: bool,
    /// Noise-free metric for the window (including trap severity).
    pub true_value: f64,
}

impl SimWindow {
    /// Workload output in the `metric=value` line format.
    pub fn app_output(&self, metric: &str) -> String {
        self.samples.iter().map(|v| format!("{metric}={v}\n")).collect()
    }
}

fn noisy(rng: &mut ChaCha8Rng, rel: f64) -> f64 {
    if rel <= 0.0 {
        return 1.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    (1.0 + rel * z.clamp(-3.0, 3.0)).max(0.01)
}

/// Simulates one window: updates the trap state, then draws app samples and
/// synthesizes system metrics. Draw order is fixed, so identical config
/// sequences and seeds give identical windows.
pub fn simulate_raw(
    assignments: &BTreeMap<String, KnobValue>,
    surface: &BoundSurface,
    state: &mut SimState,
    rng: &mut ChaCha8Rng,
    window_seconds: f64,
    ncpu: usize,
) -> SimWindow {
    let recovery = surface.surface.trap.as_ref().map_or(0, |t| t.recovery_windows);
    let trapped = state.step(surface.in_trap_region(assignments), recovery);
    let cost = surface.cost(assignments);
    let true_value = surface.metric_for(cost, trapped);
    let noise = surface.surface.noise;
    let samples: Vec<f64> =
        (0..surface.surface.samples_per_window).map(|_| true_value * noisy(rng, noise)).collect();

    let ipc = surface.ipc(assignments, trapped) * noisy(rng, noise / 2.0);
    let ratio = surface.perf_ratio(cost * if trapped { surface.surface.trap.as_ref().map_or(1.0, |t| t.severity) } else { 1.0 });
    let amb = |k: &str| surface.ambient(k, assignments);
    let busy = amb("napi_busy_poll").map_or(0.0, |(x, _)| x);
    let (depth, depth_idx) = amb("cstate_max").unwrap_or((1.0, 4));
    // integer knobs: the ordinal is the value itself
    let max_perf = amb("max_perf_pct").map_or(100.0, |(_, o)| o as f64);
    let min_perf = amb("min_perf_pct").map_or(20.0, |(_, o)| o as f64);

    let ncpu = ncpu.max(1) as f64;
    let load = (0.4 + 0.5 * busy).clamp(0.0, 1.0);
    let cycles = 2.0e9 * window_seconds * ncpu * load;
    let instructions = ipc * cycles;
    let refs = 0.02 * instructions;
    let miss_ratio = (0.3 / ratio.sqrt()).min(1.0);
    let counters = BTreeMap::from([
        ("cache-misses".to_string(), (refs * miss_ratio).round()),
        ("cache-references".to_string(), refs.round()),
        ("context-switches".to_string(), (2000.0 * window_seconds * ncpu * (1.0 - 0.5 * busy)).round()),
        ("cycles".to_string(), cycles.round()),
        ("instructions".to_string(), instructions.round()),
    ]);
    let package = (15.0 + 0.40 * max_perf + 0.15 * min_perf + 8.0 * busy + 6.0 * (1.0 - depth)) * noisy(rng, 0.01);
    let dram = 4.0 + 0.02 * max_perf;

    let idle = 1.0 - load;
    let deep_share = idle * (1.0 - busy);
    let mut cstate_residency = BTreeMap::new();
    let names: Vec<String> = match surface.ambient_spec("cstate_max").map(|s| &s.kind) {
        Some(crate::registry::KnobKind::Enum { values }) => values.clone(),
        _ => vec!["C0".into(), "C1".into()],
    };
    let allowed = (depth_idx.max(0) as usize).min(names.len() - 1);
    let weight_sum: f64 = (1..=allowed).map(|i| i as f64).sum();
    cstate_residency.insert(names[0].clone(), if allowed == 0 { idle } else { idle - deep_share });
    for (i, name) in names.iter().enumerate().skip(1).take(allowed) {
        cstate_residency.insert(name.clone(), deep_share * i as f64 / weight_sum);
    }

    let system = SystemMetrics {
        counters,
        ipc: Some(ipc),
        package_power_w: Some(package),
        dram_power_w: Some(dram),
        cstate_residency,
        cpu_load: Some(load),
        window_seconds,
    };
    SimWindow { samples, system, trapped, true_value }
}

/// [`simulate_raw`] reduced to a measurement record: the app metric is the
/// median of the window's samples and the reward is the app metric.
pub fn simulate_window(
    assignments: &BTreeMap<String, KnobValue>,
    surface: &BoundSurface,
    state: &mut SimState,
    rng: &mut ChaCha8Rng,
    window_index: u64,
) -> MeasurementRecord {
    let w = simulate_raw(assignments, surface, state, rng, 5.0, 1);
    let value = reduce(&w.samples, Reducer::Median).expect("at least one sample");
    MeasurementRecord {
        window_index,
        timestamp: window_index as f64 * 5.0,
        system: w.system,
        app: Some(AppMetrics {
            values: BTreeMap::from([(surface.surface.metric.clone(), value)]),
            reducer_used: Reducer::Median,
        }),
        reward: Some(value),
        noise_pct: noise_pct(&w.samples),
    }
}

/// Per-window ground truth kept by the simulated host for tests and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub window: u64,
    pub trapped: bool,
    pub in_region: bool,
    pub true_value: f64,
}

/// Simulated host: the control map lives in a [`SimulatedBackend`] and each
/// telemetry sample reads the config back from it, so only committed writes
/// influence the measured metric.
pub struct SimHost {
    backend: SimulatedBackend,
    surface: BoundSurface,
    state: SimState,
    rng: ChaCha8Rng,
    window: u64,
    fail_at: Option<u64>,
    truth: Arc<Mutex<Vec<TruthRecord>>>,
}

impl SimHost {
    /// Creates the host with every catalog knob at its default on every
    /// path of `mask`.
    pub fn new(registry: &Registry, surface: BoundSurface, mask: &BTreeSet<usize>, seed: u64) -> Self {
        let mut values = BTreeMap::new();
        for spec in registry.knobs() {
            let raw = spec.format_raw(&spec.default);
            for path in knob_paths(spec, mask) {
                values.insert(path, raw.clone());
            }
        }
        Self {
            backend: SimulatedBackend::new(values),
            surface,
            state: SimState::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            window: 0,
            fail_at: None,
            truth: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Makes the `window`-th sample (0-based) fail, for fault injection.
    pub fn fail_at_window(mut self, window: u64) -> Self {
        self.fail_at = Some(window);
        self
    }

    pub fn backend(&self) -> SimulatedBackend {
        self.backend.clone()
    }

    pub fn surface(&self) -> &BoundSurface {
        &self.surface
    }

    /// Shared handle on the ground-truth log; stays valid after the host is
    /// moved into a collector.
    pub fn truth(&self) -> Arc<Mutex<Vec<TruthRecord>>> {
        self.truth.clone()
    }

    /// Current values of the surface knobs as read from the control map;
    /// per-cpu knobs read from their first path.
    pub fn current_assignments(&self, mask: &BTreeSet<usize>) -> BTreeMap<String, KnobValue> {
        let mut out = BTreeMap::new();
        for spec in self.surface.set.members() {
            let value = knob_paths(spec, mask)
                .first()
                .and_then(|p| self.backend.read(p).ok())
                .and_then(|raw| spec.parse_raw(&raw))
                .unwrap_or_else(|| spec.default.clone());
            out.insert(spec.name.clone(), value);
        }
        out
    }
}

impl TelemetrySource for SimHost {
    fn sample(&mut self, duration: f64, cpus: &BTreeSet<usize>) -> Result<RawWindow, TelemetryError> {
        if self.fail_at == Some(self.window) {
            self.window += 1;
            return Err(TelemetryError::Unavailable("injected telemetry failure".into()));
        }
        let assignments = self.current_assignments(cpus);
        let in_region = self.surface.in_trap_region(&assignments);
        let w = simulate_raw(&assignments, &self.surface, &mut self.state, &mut self.rng, duration, cpus.len());
        self.truth.lock().unwrap().push(TruthRecord {
            window: self.window,
            trapped: w.trapped,
            in_region,
            true_value: w.true_value,
        });
        self.window += 1;
        Ok(RawWindow { app_output: Some(w.app_output(&self.surface.surface.metric)), system: w.system })
    }
}
