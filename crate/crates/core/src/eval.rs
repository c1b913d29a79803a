//! Evaluation math: relative improvement, geometric-mean aggregation,
//! bad-window rates and variability, plus CSV report emission.
//!
//! Conventions pinned by tests:
//! * standard deviations are sample (n - 1) deviations;
//! * percentiles interpolate linearly between order statistics at
//!   position `p * (n - 1)`;
//! * a window is bad when it is strictly worse than the fixed-default mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{sorted_quantile, Direction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("values must be positive (got {0})")]
    NonPositive(f64),
    #[error("empty input")]
    Empty,
    #[error("at least two tuning windows are needed per rerun")]
    TooFewWindows,
    #[error("default mean is zero")]
    ZeroReference,
    #[error("schema mismatch for workload `{0}`")]
    SchemaMismatch(String),
    #[error("io: {0}")]
    Io(String),
}

/// Relative improvement in percent, positive when `tuned` is better.
pub fn improvement(default_value: f64, tuned_value: f64, direction: Direction) -> Result<f64, EvalError> {
    Ok((factor(default_value, tuned_value, direction)? - 1.0) * 100.0)
}

/// Multiplicative improvement factor, `1 + improvement / 100`.
pub fn factor(default_value: f64, tuned_value: f64, direction: Direction) -> Result<f64, EvalError> {
    for v in [default_value, tuned_value] {
        if !(v > 0.0) {
            return Err(EvalError::NonPositive(v));
        }
    }
    Ok(match direction {
        Direction::Min => default_value / tuned_value,
        Direction::Max => tuned_value / default_value,
    })
}

/// Geometric mean of improvement factors, returned as a percentage.
pub fn geomean_improvement(factors: &[f64]) -> Result<f64, EvalError> {
    if factors.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut log_sum = 0.0;
    for &f in factors {
        if !(f > 0.0) {
            return Err(EvalError::NonPositive(f));
        }
        log_sum += f.ln();
    }
    Ok(((log_sum / factors.len() as f64).exp() - 1.0) * 100.0)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Linear-interpolation percentile, `p` in [0, 1].
pub fn percentile(values: &[f64], p: f64) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted_quantile(&sorted, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Tuning,
    Stable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub mean: f64,
    pub values: Vec<f64>,
    pub direction: Direction,
}

impl PhaseSummary {
    pub fn new(phase: Phase, values: Vec<f64>, direction: Direction) -> Self {
        let mean = if values.is_empty() { f64::NAN } else { mean(&values) };
        Self { phase, mean, values, direction }
    }
}

/// Tuning-window traces of several reruns of one (tuner, workload).
#[derive(Debug, Clone, PartialEq)]
pub struct RerunSet {
    pub traces: Vec<Vec<f64>>,
    /// Mean of the metric under the fixed default configuration.
    pub mu_fixed: f64,
    pub direction: Direction,
}

/// Fraction of windows strictly worse than `mu_fixed`.
pub fn bad_fraction(trace: &[f64], mu_fixed: f64, direction: Direction) -> f64 {
    let bad = trace.iter().filter(|&&v| direction.better(mu_fixed, v)).count();
    bad as f64 / trace.len() as f64
}

/// (P50, P10) of the per-rerun bad-window fractions.
pub fn bad_window_rates(reruns: &RerunSet) -> Result<(f64, f64), EvalError> {
    if reruns.traces.is_empty() || reruns.traces.iter().any(|t| t.is_empty()) {
        return Err(EvalError::Empty);
    }
    let fractions: Vec<f64> =
        reruns.traces.iter().map(|t| bad_fraction(t, reruns.mu_fixed, reruns.direction)).collect();
    Ok((percentile(&fractions, 0.5)?, percentile(&fractions, 0.1)?))
}

/// Mean over reruns of `sigma_r / |mu_fixed|`, in percent.
pub fn variability(reruns: &RerunSet) -> Result<f64, EvalError> {
    if reruns.traces.is_empty() {
        return Err(EvalError::Empty);
    }
    if reruns.traces.iter().any(|t| t.len() < 2) {
        return Err(EvalError::TooFewWindows);
    }
    if reruns.mu_fixed == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    let total: f64 = reruns.traces.iter().map(|t| sample_std(t) / reruns.mu_fixed.abs()).sum();
    Ok(total / reruns.traces.len() as f64 * 100.0)
}

/// Per-window goal-metric trace of one session, the unit the report
/// aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub tuner: String,
    pub workload: String,
    pub metric: String,
    pub direction: Direction,
    /// Fixed-default mean used as the improvement reference.
    pub default_mean: f64,
    pub tuning: Vec<f64>,
    pub stable: Vec<f64>,
}

pub const PER_BENCHMARK_HEADER: &str =
    "tuner,workload,metric,direction,reruns,default,tuning_mean,stable_mean,tuning_impr_pct,stable_impr_pct";
pub const AGGREGATE_HEADER: &str = "tuner,workloads,tuning_geomean_pct,stable_geomean_pct";
pub const ROBUSTNESS_HEADER: &str = "tuner,workload,reruns,p50_bad_rate,p10_bad_rate,variability_pct";
pub const WINDOWS_HEADER: &str = "tuner,workload,rerun,window,phase,value";

/// Writes `per_benchmark.csv`, `aggregate.csv`, `robustness.csv` and
/// `windows.csv` into `dir`. Returns the written paths.
pub fn emit_report(sessions: &[SessionTrace], dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if sessions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut schema: BTreeMap<&str, (&str, Direction)> = BTreeMap::new();
    for s in sessions {
        let entry = schema.entry(&s.workload).or_insert((&s.metric, s.direction));
        if *entry != (s.metric.as_str(), s.direction) {
            return Err(EvalError::SchemaMismatch(s.workload.clone()));
        }
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&SessionTrace>> = BTreeMap::new();
    for s in sessions {
        groups.entry((&s.tuner, &s.workload)).or_default().push(s);
    }

    let mut per = format!("{PER_BENCHMARK_HEADER}\n");
    let mut robust = format!("{ROBUSTNESS_HEADER}\n");
    let mut factors: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((tuner, workload), runs) in &groups {
        let first = runs[0];
        let dir_ = first.direction;
        let default = mean(&runs.iter().map(|r| r.default_mean).collect::<Vec<_>>());
        let tuning: Vec<f64> = runs.iter().flat_map(|r| r.tuning.iter().copied()).collect();
        let stable: Vec<f64> = runs.iter().flat_map(|r| r.stable.iter().copied()).collect();
        let tmean = if tuning.is_empty() { f64::NAN } else { mean(&tuning) };
        let smean = if stable.is_empty() { f64::NAN } else { mean(&stable) };
        let timp = improvement(default, tmean, dir_).ok();
        let simp = improvement(default, smean, dir_).ok();
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
        let _ = writeln!(
            per,
            "{tuner},{workload},{},{},{},{default:.6},{tmean:.6},{smean:.6},{},{}",
            first.metric,
            dir_.label(),
            runs.len(),
            fmt(timp),
            fmt(simp)
        );
        let f = factors.entry(tuner).or_default();
        if let Some(t) = timp {
            f.0.push(1.0 + t / 100.0);
        }
        if let Some(s) = simp {
            f.1.push(1.0 + s / 100.0);
        }
        let set = RerunSet { traces: runs.iter().map(|r| r.tuning.clone()).collect(), mu_fixed: default, direction: dir_ };
        let rates = bad_window_rates(&set).ok();
        let var = variability(&set).ok();
        let _ = writeln!(
            robust,
            "{tuner},{workload},{},{},{},{}",
            runs.len(),
            fmt(rates.map(|r| r.0)),
            fmt(rates.map(|r| r.1)),
            fmt(var)
        );
    }
    let mut agg = format!("{AGGREGATE_HEADER}\n");
    for (tuner, (t, s)) in &factors {
        let g = |v: &[f64]| geomean_improvement(v).map_or(String::new(), |g| format!("{g:.4}"));
        let n = groups.keys().filter(|(tn, _)| tn == tuner).count();
        let _ = writeln!(agg, "{tuner},{n},{},{}", g(t), g(s));
    }
    let mut windows = format!("{WINDOWS_HEADER}\n");
    for ((tuner, workload), runs) in &groups {
        for (r, run) in runs.iter().enumerate() {
            let phases = run.tuning.iter().map(|v| ("tuning", v)).chain(run.stable.iter().map(|v| ("stable", v)));
            for (w, (phase, v)) in phases.enumerate() {
                let _ = writeln!(windows, "{tuner},{workload},{r},{w},{phase},{v}");
            }
        }
    }

    fs::create_dir_all(dir).map_err(|e| EvalError::Io(e.to_string()))?;
    let mut out = Vec::new();
    for (name, body) in
        [("per_benchmark.csv", per), ("aggregate.csv", agg), ("robustness.csv", robust), ("windows.csv", windows)]
    {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn improvement_examples() {
        let i = improvement(336.7, 365.9, Direction::Max).unwrap();
        assert_eq!(format!("{i:.1}"), "8.7");
        assert_eq!(improvement(20.0, 10.0, Direction::Min).unwrap(), 100.0);
        let m = improvement(27.9, 1.3, Direction::Min).unwrap();
        assert!(((m - 2052.7) / 2052.7).abs() < 0.015, "{m}");
        assert!(improvement(0.0, 1.0, Direction::Min).is_err());
        assert!(improvement(1.0, -1.0, Direction::Max).is_err());
    }

    #[test]
    fn geomean_examples() {
        assert!(geomean_improvement(&[2.0, 0.5]).unwrap().abs() < 1e-12);
        assert!((geomean_improvement(&[1.5, 1.5, 1.5]).unwrap() - 50.0).abs() < 1e-9);
        assert_eq!(geomean_improvement(&[]), Err(EvalError::Empty));
        assert!(geomean_improvement(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn robustness_examples() {
        // three reruns whose bad fractions are 0.1, 0.2, 0.3 against mu = 10
        let trace = |bad: usize| (0..10).map(|i| if i < bad { 11.0 } else { 9.0 }).collect::<Vec<_>>();
        let set = RerunSet { traces: vec![trace(1), trace(2), trace(3)], mu_fixed: 10.0, direction: Direction::Min };
        let (p50, p10) = bad_window_rates(&set).unwrap();
        assert!((p50 - 0.2).abs() < 1e-12);
        assert!((p10 - 0.12).abs() < 1e-12);
        let good = RerunSet { traces: vec![vec![5.0; 4]], mu_fixed: 10.0, direction: Direction::Min };
        assert_eq!(bad_window_rates(&good).unwrap(), (0.0, 0.0));
        // ties are not bad
        let tie = RerunSet { traces: vec![vec![10.0; 4]], mu_fixed: 10.0, direction: Direction::Max };
        assert_eq!(bad_window_rates(&tie).unwrap(), (0.0, 0.0));

        let one = RerunSet { traces: vec![vec![1.0, 2.0, 3.0]], mu_fixed: 2.0, direction: Direction::Min };
        assert!((variability(&one).unwrap() - 50.0).abs() < 1e-12);
        let flat = RerunSet { traces: vec![vec![4.0; 5]], mu_fixed: 2.0, direction: Direction::Min };
        assert_eq!(variability(&flat).unwrap(), 0.0);
        // sigma/|mu| of 0.2 and 0.4
        let two = RerunSet {
            traces: vec![vec![9.0, 10.0, 11.0], vec![8.0, 10.0, 12.0]],
            mu_fixed: 5.0,
            direction: Direction::Min,
        };
        assert!((variability(&two).unwrap() - 30.0).abs() < 1e-9);
        assert_eq!(variability(&RerunSet { traces: vec![vec![1.0]], ..one.clone() }), Err(EvalError::TooFewWindows));
        assert_eq!(variability(&RerunSet { mu_fixed: 0.0, ..one }), Err(EvalError::ZeroReference));
    }

    proptest! {
        #[test]
        fn factor_antisymmetry(a in 0.01f64..1e4, b in 0.01f64..1e4, max in any::<bool>()) {
            let d = if max { Direction::Max } else { Direction::Min };
            let p = factor(a, b, d).unwrap() * factor(b, a, d).unwrap();
            prop_assert!((p - 1.0).abs() < 1e-12);
        }

        #[test]
        fn geomean_permutation_and_scale(mut fs in prop::collection::vec(0.05f64..20.0, 1..12), c in 0.1f64..10.0) {
            let g = geomean_improvement(&fs).unwrap();
            fs.reverse();
            prop_assert!((geomean_improvement(&fs).unwrap() - g).abs() < 1e-9 * (1.0 + g.abs()));
            let scaled: Vec<f64> = fs.iter().map(|f| f * c).collect();
            let gs = geomean_improvement(&scaled).unwrap();
            prop_assert!(((1.0 + gs / 100.0) / (1.0 + g / 100.0) - c).abs() < 1e-9 * c);
        }
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |tuner: &str, workload: &str, dir_: Direction, tuning: Vec<f64>, stable: Vec<f64>| SessionTrace {
            tuner: tuner.into(),
            workload: workload.into(),
            metric: if dir_ == Direction::Min { "p99_ms".into() } else { "ops".into() },
            direction: dir_,
            default_mean: 10.0,
            tuning,
            stable,
        };
        let sessions = vec![
            mk("dual", "a", Direction::Min, vec![8.0, 6.0], vec![5.0, 5.0]),
            mk("dual", "b", Direction::Max, vec![12.0, 14.0], vec![20.0, 20.0]),
        ];
        emit_report(&sessions, dir.path()).unwrap();
        let per = fs::read_to_string(dir.path().join("per_benchmark.csv")).unwrap();
        let rows: Vec<&str> = per.lines().collect();
        assert_eq!(rows[0], PER_BENCHMARK_HEADER);
        // both stable improvements are +100% after direction adjustment
        assert!(rows[1].ends_with(",100.0000"), "{}", rows[1]);
        assert!(rows[2].ends_with(",100.0000"), "{}", rows[2]);
        let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert!(agg.lines().nth(1).unwrap().ends_with(",100.0000"));

        let bad = vec![sessions[0].clone(), SessionTrace { metric: "other".into(), ..sessions[0].clone() }];
        assert!(matches!(emit_report(&bad, dir.path()), Err(EvalError::SchemaMismatch(_))));
    }
}
