use std::collections::BTreeMap;

use regex::Regex;

use super::{reduce, AppMetrics, Reducer, TelemetryError};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub metric: String,
    pub value: f64,
}

/// Contract between the collector and a benchmark/workload.
///
/// `parse_window` must be deterministic on identical input.
pub trait WorkloadAdapter: Send {
    fn setup(&mut self) -> Result<(), TelemetryError> {
        Ok(())
    }

    fn parse_window(&self, raw: &str) -> Vec<Sample>;

    fn reduce(&self, samples: &[Sample]) -> Result<AppMetrics, TelemetryError>;

    fn cleanup(&mut self) {}

    /// Metric names this adapter can report.
    fn metrics(&self) -> Vec<String>;
}

#[derive(Debug, Clone)]
pub struct FieldRule {
    pub metric: String,
    pub pattern: Regex,
    pub reducer: Reducer,
}

impl FieldRule {
    /// `pattern` must have one capture group holding the number.
    pub fn new(metric: &str, pattern: &str, reducer: Reducer) -> Result<Self, TelemetryError> {
        let pattern = Regex::new(pattern).map_err(|e| TelemetryError::Adapter(e.to_string()))?;
        if pattern.captures_len() < 2 {
            return Err(TelemetryError::Adapter(format!("pattern for `{metric}` has no capture group")));
        }
        Ok(Self { metric: metric.to_string(), pattern, reducer })
    }
}

/// Generic adapter: extracts numbers from workload output lines with one
/// regex per metric and reduces each metric's samples per window.
#[derive(Debug, Clone)]
pub struct StdoutSampler {
    rules: Vec<FieldRule>,
}

impl StdoutSampler {
    pub fn new(rules: Vec<FieldRule>) -> Self {
        Self { rules }
    }

    /// Matches `name=value` tokens, which is what the simulated host prints.
    pub fn key_value(metrics: &[&str], reducer: Reducer) -> Self {
        let rules = metrics
            .iter()
            .map(|m| {
                FieldRule::new(m, &format!(r"\b{}=([-+0-9.eE]+)", regex::escape(m)), reducer)
                    .expect("escaped pattern is valid")
            })
            .collect();
        Self { rules }
    }
}

impl WorkloadAdapter for StdoutSampler {
    fn parse_window(&self, raw: &str) -> Vec<Sample> {
        let mut out = Vec::new();
        for line in raw.lines() {
            for rule in &self.rules {
                for caps in rule.pattern.captures_iter(line) {
                    if let Some(v) = caps.get(1).and_then(|m| m.as_str().parse::<f64>().ok()) {
                        if v.is_finite() {
                            out.push(Sample { metric: rule.metric.clone(), value: v });
                        }
                    }
                }
            }
        }
        out
    }

    fn reduce(&self, samples: &[Sample]) -> Result<AppMetrics, TelemetryError> {
        let mut values = BTreeMap::new();
        for rule in &self.rules {
            let series: Vec<f64> = samples.iter().filter(|s| s.metric == rule.metric).map(|s| s.value).collect();
            if series.is_empty() {
                continue;
            }
            values.insert(rule.metric.clone(), reduce(&series, rule.reducer)?);
        }
        let reducer_used = self.rules.first().map(|r| r.reducer).unwrap_or(Reducer::Mean);
        Ok(AppMetrics { values, reducer_used })
    }

    fn metrics(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.metric.clone()).collect()
    }
}
