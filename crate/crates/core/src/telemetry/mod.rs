//! Per-window measurement records and the reward channel abstraction.

mod adapter;
pub mod linux;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapter::{FieldRule, Sample, StdoutSampler, WorkloadAdapter};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TelemetryError {
    #[error("no samples to reduce")]
    EmptySamples,
    #[error("cycles counter missing or zero")]
    NoCycles,
    #[error("metric `{0}` absent from record")]
    MissingMetric(String),
    #[error("window duration must be positive")]
    BadDuration,
    #[error("collector unavailable: {0}")]
    Unavailable(String),
    #[error("adapter error: {0}")]
    Adapter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
}

impl Direction {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Min => a < b,
            Direction::Max => a > b,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::Min => "minimize",
            Direction::Max => "maximize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Mean,
    Median,
    Sum,
}

pub fn reduce(samples: &[f64], reducer: Reducer) -> Result<f64, TelemetryError> {
    if samples.is_empty() {
        return Err(TelemetryError::EmptySamples);
    }
    Ok(match reducer {
        Reducer::Sum => samples.iter().sum(),
        Reducer::Mean => samples.iter().sum::<f64>() / samples.len() as f64,
        Reducer::Median => {
            let mut sorted = samples.to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            }
        }
    })
}

/// Linear-interpolation quantile of an already sorted slice, `q` in [0, 1].
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Relative interquartile spread in percent, for four or more samples.
pub fn noise_pct(samples: &[f64]) -> Option<f64> {
    if samples.len() < 4 {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted_quantile(&sorted, 0.5);
    if median == 0.0 {
        return None;
    }
    Some((sorted_quantile(&sorted, 0.75) - sorted_quantile(&sorted, 0.25)) / median.abs() * 100.0)
}

pub fn derive_ipc(counters: &BTreeMap<String, f64>) -> Result<f64, TelemetryError> {
    let cycles = counters.get("cycles").copied().filter(|c| *c > 0.0).ok_or(TelemetryError::NoCycles)?;
    let instructions = counters.get("instructions").copied().unwrap_or(0.0);
    Ok(instructions / cycles)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub counters: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub package_power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dram_power_w: Option<f64>,
    pub cstate_residency: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_load: Option<f64>,
    pub window_seconds: f64,
}

impl SystemMetrics {
    /// Fills `ipc` from the counters when both are present.
    pub fn with_derived(mut self) -> Self {
        if self.ipc.is_none() {
            self.ipc = derive_ipc(&self.counters).ok();
        }
        self
    }

    /// Named scalar lookup used by proxy channels: `ipc`, `llc_miss_rate`,
    /// `package_power_w`, `dram_power_w`, `cpu_load`, or any raw counter.
    pub fn scalar(&self, name: &str) -> Option<f64> {
        match name {
            "ipc" => self.ipc,
            "package_power_w" => self.package_power_w,
            "dram_power_w" => self.dram_power_w,
            "cpu_load" => self.cpu_load,
            "llc_miss_rate" => {
                let refs = *self.counters.get("cache-references")?;
                let misses = *self.counters.get("cache-misses")?;
                (refs > 0.0).then(|| misses / refs)
            }
            other => self.counters.get(other).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppMetrics {
    pub values: BTreeMap<String, f64>,
    pub reducer_used: Reducer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub window_index: u64,
    pub timestamp: f64,
    pub system: SystemMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<AppMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_pct: Option<f64>,
}

impl MeasurementRecord {
    pub fn app_metric(&self, name: &str) -> Option<f64> {
        self.app.as_ref().and_then(|a| a.values.get(name).copied())
    }

    /// Flat key/value view with the stable log field names
    /// (`counters.*`, `power.pkg_w`, `cstate.*`, `app.*`, ...).
    pub fn flat_fields(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.system.counters {
            out.insert(format!("counters.{k}"), *v);
        }
        if let Some(v) = self.system.ipc {
            out.insert("ipc".into(), v);
        }
        if let Some(v) = self.system.package_power_w {
            out.insert("power.pkg_w".into(), v);
        }
        if let Some(v) = self.system.dram_power_w {
            out.insert("power.dram_w".into(), v);
        }
        for (k, v) in &self.system.cstate_residency {
            out.insert(format!("cstate.{k}"), *v);
        }
        if let Some(v) = self.system.cpu_load {
            out.insert("load".into(), v);
        }
        if let Some(app) = &self.app {
            for (k, v) in &app.values {
                out.insert(format!("app.{k}"), *v);
            }
        }
        if let Some(r) = self.reward {
            out.insert("reward".into(), r);
        }
        out
    }
}

/// What drives tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardChannel {
    App { metric: String, direction: Direction },
    SystemBundle,
    Proxy { metric: String, direction: Direction },
}

impl RewardChannel {
    pub fn direction(&self) -> Option<Direction> {
        match self {
            RewardChannel::App { direction, .. } | RewardChannel::Proxy { direction, .. } => Some(*direction),
            RewardChannel::SystemBundle => None,
        }
    }

    pub fn metric(&self) -> Option<&str> {
        match self {
            RewardChannel::App { metric, .. } | RewardChannel::Proxy { metric, .. } => Some(metric),
            RewardChannel::SystemBundle => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reward {
    Scalar(f64),
    /// The whole system record is the observation.
    Bundle,
}

pub fn reward_of(record: &MeasurementRecord, channel: &RewardChannel) -> Result<Reward, TelemetryError> {
    match channel {
        RewardChannel::App { metric, .. } => record
            .app_metric(metric)
            .map(Reward::Scalar)
            .ok_or_else(|| TelemetryError::MissingMetric(metric.clone())),
        RewardChannel::Proxy { metric, .. } => record
            .system
            .scalar(metric)
            .map(Reward::Scalar)
            .ok_or_else(|| TelemetryError::MissingMetric(metric.clone())),
        RewardChannel::SystemBundle => Ok(Reward::Bundle),
    }
}

/// Raw output of one window from a telemetry source.
#[derive(Debug, Clone, Default)]
pub struct RawWindow {
    pub system: SystemMetrics,
    /// Workload output produced during the window, if any.
    pub app_output: Option<String>,
}

/// Something that can observe the host for one window.
pub trait TelemetrySource: Send {
    fn sample(&mut self, duration: f64, cpus: &BTreeSet<usize>) -> Result<RawWindow, TelemetryError>;
}

/// Turns telemetry source output into numbered measurement records.
/// Not reentrant: one window at a time.
pub struct Collector {
    source: Box<dyn TelemetrySource>,
    adapter: Option<Box<dyn WorkloadAdapter>>,
    channel: RewardChannel,
    next_index: u64,
}

impl Collector {
    pub fn new(
        source: Box<dyn TelemetrySource>,
        adapter: Option<Box<dyn WorkloadAdapter>>,
        channel: RewardChannel,
    ) -> Result<Self, TelemetryError> {
        if let (RewardChannel::App { metric, .. }, Some(a)) = (&channel, adapter.as_ref()) {
            if !a.metrics().iter().any(|m| m == metric) {
                return Err(TelemetryError::Adapter(format!("adapter does not expose `{metric}`")));
            }
        }
        if matches!(channel, RewardChannel::App { .. }) && adapter.is_none() {
            return Err(TelemetryError::Adapter("app reward channel needs a workload adapter".into()));
        }
        Ok(Self { source, adapter, channel, next_index: 0 })
    }

    pub fn setup(&mut self) -> Result<(), TelemetryError> {
        match self.adapter.as_mut() {
            Some(a) => a.setup(),
            None => Ok(()),
        }
    }

    pub fn cleanup(&mut self) {
        if let Some(a) = self.adapter.as_mut() {
            a.cleanup();
        }
    }

    pub fn channel(&self) -> &RewardChannel {
        &self.channel
    }

    pub fn collect_window(
        &mut self,
        duration: f64,
        cpus: &BTreeSet<usize>,
        timestamp: f64,
    ) -> Result<MeasurementRecord, TelemetryError> {
        if duration <= 0.0 {
            return Err(TelemetryError::BadDuration);
        }
        let raw = self.source.sample(duration, cpus)?;
        let mut noise = None;
        let app = match (self.adapter.as_ref(), raw.app_output.as_deref()) {
            (Some(adapter), Some(text)) => {
                let samples = adapter.parse_window(text);
                if let Some(metric) = self.channel.metric() {
                    let series: Vec<f64> = samples.iter().filter(|s| s.metric == metric).map(|s| s.value).collect();
                    noise = noise_pct(&series);
                }
                Some(adapter.reduce(&samples)?)
            }
            _ => None,
        };
        let mut record = MeasurementRecord {
            window_index: self.next_index,
            timestamp,
            system: raw.system.with_derived(),
            app,
            reward: None,
            noise_pct: noise,
        };
        record.reward = match reward_of(&record, &self.channel)? {
            Reward::Scalar(v) => Some(v),
            Reward::Bundle => None,
        };
        self.next_index += 1;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn reducers() {
        assert_eq!(reduce(&[1.0, 2.0, 9.0], Reducer::Median).unwrap(), 2.0);
        assert_eq!(reduce(&[10.0, 12.0, 14.0], Reducer::Median).unwrap(), 12.0);
        assert_eq!(reduce(&[1.0, 2.0, 3.0], Reducer::Sum).unwrap(), 6.0);
        assert_eq!(reduce(&[4.0, 1.0, 3.0, 2.0], Reducer::Median).unwrap(), 2.5);
        assert_eq!(reduce(&[], Reducer::Mean), Err(TelemetryError::EmptySamples));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let m = reduce(&xs, Reducer::Mean).unwrap();
        assert!((m - 0.5).abs() <= 0.05, "{m}");
    }

    #[test]
    fn ipc_derivation() {
        let c = BTreeMap::from([("instructions".to_string(), 1.71e9), ("cycles".to_string(), 1.0e9)]);
        assert!((derive_ipc(&c).unwrap() - 1.71).abs() < 1e-12);
        let c = BTreeMap::from([("instructions".to_string(), 0.0), ("cycles".to_string(), 1.0e9)]);
        assert_eq!(derive_ipc(&c).unwrap(), 0.0);
        let c = BTreeMap::from([("instructions".to_string(), 5.0), ("cycles".to_string(), 0.0)]);
        assert_eq!(derive_ipc(&c), Err(TelemetryError::NoCycles));
    }

    fn record(p99: Option<f64>, ipc: f64) -> MeasurementRecord {
        MeasurementRecord {
            window_index: 0,
            timestamp: 0.0,
            system: SystemMetrics { ipc: Some(ipc), window_seconds: 5.0, ..Default::default() },
            app: p99.map(|v| AppMetrics { values: BTreeMap::from([("p99_ms".to_string(), v)]), reducer_used: Reducer::Median }),
            reward: None,
            noise_pct: None,
        }
    }

    #[test]
    fn reward_channels() {
        let app = RewardChannel::App { metric: "p99_ms".into(), direction: Direction::Min };
        let proxy = RewardChannel::Proxy { metric: "ipc".into(), direction: Direction::Max };
        assert_eq!(reward_of(&record(Some(12.21), 1.71), &app).unwrap(), Reward::Scalar(12.21));
        assert_eq!(reward_of(&record(Some(12.21), 1.71), &proxy).unwrap(), Reward::Scalar(1.71));
        assert_eq!(reward_of(&record(None, 1.71), &RewardChannel::SystemBundle).unwrap(), Reward::Bundle);
        assert_eq!(reward_of(&record(None, 1.71), &app), Err(TelemetryError::MissingMetric("p99_ms".into())));
    }

    #[test]
    fn missing_counters_stay_absent() {
        let s = SystemMetrics { counters: BTreeMap::from([("instructions".to_string(), 3.0)]), ..Default::default() }
            .with_derived();
        assert_eq!(s.ipc, None);
        assert_eq!(s.scalar("llc_miss_rate"), None);
    }

    #[test]
    fn noise_annotation_needs_four_samples() {
        assert_eq!(noise_pct(&[1.0, 2.0, 3.0]), None);
        // quartiles 1.75 and 3.25 around median 2.5
        let n = noise_pct(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((n - 60.0).abs() < 1e-9);
    }

    struct FixedSource(String);

    impl TelemetrySource for FixedSource {
        fn sample(&mut self, duration: f64, _cpus: &BTreeSet<usize>) -> Result<RawWindow, TelemetryError> {
            Ok(RawWindow {
                system: SystemMetrics {
                    counters: BTreeMap::from([("instructions".into(), 2e9), ("cycles".into(), 1e9)]),
                    window_seconds: duration,
                    ..Default::default()
                },
                app_output: Some(self.0.clone()),
            })
        }
    }

    #[test]
    fn collector_numbers_windows_and_reduces_app_samples() {
        let sampler = StdoutSampler::new(vec![FieldRule::new("p99_ms", r"p99=([0-9.]+)", Reducer::Median).unwrap()]);
        let mut c = Collector::new(
            Box::new(FixedSource("p99=10\np99=14\np99=12\n".into())),
            Some(Box::new(sampler)),
            RewardChannel::App { metric: "p99_ms".into(), direction: Direction::Min },
        )
        .unwrap();
        let cpus = BTreeSet::from([0]);
        let a = c.collect_window(5.0, &cpus, 5.0).unwrap();
        let b = c.collect_window(5.0, &cpus, 10.0).unwrap();
        assert_eq!((a.window_index, b.window_index), (0, 1));
        assert_eq!(a.app_metric("p99_ms"), Some(12.0));
        assert_eq!(a.reward, Some(12.0));
        assert_eq!(a.system.ipc, Some(2.0));
        assert!(c.collect_window(0.0, &cpus, 0.0).is_err());

        let mut bundle =
            Collector::new(Box::new(FixedSource(String::new())), None, RewardChannel::SystemBundle).unwrap();
        let r = bundle.collect_window(5.0, &cpus, 5.0).unwrap();
        assert_eq!(r.reward, None);
        assert!(r.system.ipc.is_some());
        assert!(Collector::new(
            Box::new(FixedSource(String::new())),
            None,
            RewardChannel::App { metric: "p99_ms".into(), direction: Direction::Min }
        )
        .is_err());
    }

    #[test]
    fn record_json_round_trip() {
        let mut r = record(Some(3.5), 1.2);
        r.system.cstate_residency.insert("C1".into(), 0.4);
        r.noise_pct = Some(6.0);
        let back: MeasurementRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn median_matches_sort_oracle(xs in prop::collection::vec(-1e6f64..1e6, 1..60)) {
            let mut s = xs.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = s.len();
            let oracle = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
            prop_assert_eq!(reduce(&xs, Reducer::Median).unwrap(), oracle);
        }

        #[test]
        fn singleton_identity(x in -1e9f64..1e9) {
            for r in [Reducer::Mean, Reducer::Median, Reducer::Sum] {
                prop_assert_eq!(reduce(&[x], r).unwrap(), x);
            }
        }

        #[test]
        fn sum_is_permutation_invariant(xs in prop::collection::vec(0i32..1000, 1..40)) {
            let a: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
            let mut b = a.clone();
            b.reverse();
            prop_assert_eq!(reduce(&a, Reducer::Sum).unwrap(), reduce(&b, Reducer::Sum).unwrap());
        }

        #[test]
        fn ipc_scale_invariant(ins in 1.0f64..1e10, cyc in 1.0f64..1e10, k in 1u32..1000) {
            let k = k as f64;
            let a = BTreeMap::from([("instructions".to_string(), ins), ("cycles".to_string(), cyc)]);
            let b = BTreeMap::from([("instructions".to_string(), ins * k), ("cycles".to_string(), cyc * k)]);
            let (x, y) = (derive_ipc(&a).unwrap(), derive_ipc(&b).unwrap());
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
