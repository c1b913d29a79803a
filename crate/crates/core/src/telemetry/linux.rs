//! Live host telemetry: `perf stat` counters, RAPL energy, cpuidle residency
//! and `/proc/stat` utilization, sampled around one window.
//!
//! Cpu load is aggregate utilization over the cpu scope from `/proc/stat`;
//! it approximates, but is not identical to, scheduler run-queue load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::process::Command;

use super::{RawWindow, SystemMetrics, TelemetryError, TelemetrySource};

pub const PERF_EVENTS: [&str; 5] = ["instructions", "cycles", "cache-references", "cache-misses", "context-switches"];

/// Parses `perf stat -x,` output (one CSV line per event on stderr).
/// Unsupported or uncounted events are skipped, not zero-filled.
pub fn parse_perf_csv(text: &str) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            continue;
        }
        let Ok(value) = fields[0].trim().parse::<f64>() else { continue };
        // event name may carry a modifier suffix such as `cycles:u`
        let event = fields[2].trim().split(':').next().unwrap_or("").to_string();
        if !event.is_empty() {
            *out.entry(event).or_insert(0.0) += value;
        }
    }
    out
}

/// `cpu<N>` lines of `/proc/stat` as (busy, total) jiffies for cpus in scope.
pub fn parse_proc_stat(text: &str, cpus: &BTreeSet<usize>) -> (u64, u64) {
    let mut busy = 0;
    let mut total = 0;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let Some(label) = parts.next() else { continue };
        let Some(idx) = label.strip_prefix("cpu").and_then(|s| s.parse::<usize>().ok()) else { continue };
        if !cpus.contains(&idx) {
            continue;
        }
        let vals: Vec<u64> = parts.filter_map(|p| p.parse().ok()).collect();
        if vals.len() < 4 {
            continue;
        }
        let idle = vals[3] + vals.get(4).copied().unwrap_or(0);
        let sum: u64 = vals.iter().take(8).sum();
        busy += sum - idle;
        total += sum;
    }
    (busy, total)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct RaplReading {
    package_uj: Option<f64>,
    dram_uj: Option<f64>,
}

fn read_trimmed(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

fn read_rapl(sysfs: &Path) -> RaplReading {
    let mut out = RaplReading::default();
    let Ok(entries) = fs::read_dir(sysfs.join("class/powercap")) else { return out };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    for dir in dirs {
        let (Some(name), Some(energy)) = (read_trimmed(&dir.join("name")), read_trimmed(&dir.join("energy_uj"))) else {
            continue;
        };
        let Ok(energy) = energy.parse::<f64>() else { continue };
        if name.starts_with("package") {
            *out.package_uj.get_or_insert(0.0) += energy;
        } else if name == "dram" {
            *out.dram_uj.get_or_insert(0.0) += energy;
        }
    }
    out
}

/// Per-state idle time in microseconds, summed over the cpu scope.
fn read_cpuidle(sysfs: &Path, cpus: &BTreeSet<usize>) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for cpu in cpus {
        let base = sysfs.join(format!("devices/system/cpu/cpu{cpu}/cpuidle"));
        let Ok(entries) = fs::read_dir(&base) else { continue };
        for entry in entries.flatten() {
            let dir = entry.path();
            let (Some(name), Some(time)) = (read_trimmed(&dir.join("name")), read_trimmed(&dir.join("time"))) else {
                continue;
            };
            if let Ok(t) = time.parse::<f64>() {
                *out.entry(name).or_insert(0.0) += t;
            }
        }
    }
    out
}

fn cpu_list(cpus: &BTreeSet<usize>) -> String {
    cpus.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

/// Telemetry from a live Linux host.
pub struct LinuxSource {
    sysfs: PathBuf,
    procfs: PathBuf,
    perf: String,
    app_log: Option<PathBuf>,
    app_offset: u64,
}

impl LinuxSource {
    pub fn new(app_log: Option<PathBuf>) -> Self {
        Self { sysfs: "/sys".into(), procfs: "/proc".into(), perf: "perf".into(), app_log, app_offset: 0 }
    }

    /// Points the source at alternative sysfs/procfs trees and perf binary.
    pub fn with_roots(mut self, sysfs: impl Into<PathBuf>, procfs: impl Into<PathBuf>, perf: &str) -> Self {
        self.sysfs = sysfs.into();
        self.procfs = procfs.into();
        self.perf = perf.to_string();
        self
    }

    pub fn with_perf(mut self, perf: &str) -> Self {
        self.perf = perf.to_string();
        self
    }

    fn read_app_output(&mut self) -> Option<String> {
        let path = self.app_log.as_ref()?;
        let mut file = fs::File::open(path).ok()?;
        file.seek(SeekFrom::Start(self.app_offset)).ok()?;
        let mut text = String::new();
        file.read_to_string(&mut text).ok()?;
        self.app_offset += text.len() as u64;
        Some(text)
    }
}

impl TelemetrySource for LinuxSource {
    fn sample(&mut self, duration: f64, cpus: &BTreeSet<usize>) -> Result<RawWindow, TelemetryError> {
        let stat_before = fs::read_to_string(self.procfs.join("stat")).unwrap_or_default();
        let rapl_before = read_rapl(&self.sysfs);
        let idle_before = read_cpuidle(&self.sysfs, cpus);

        let output = Command::new(&self.perf)
            .args(["stat", "-x", ",", "-a", "-C", &cpu_list(cpus), "-e", &PERF_EVENTS.join(","), "--"])
            .args(["sleep", &format!("{duration}")])
            .output()
            .map_err(|e| TelemetryError::Unavailable(format!("{}: {e}", self.perf)))?;
        if !output.status.success() {
            return Err(TelemetryError::Unavailable(String::from_utf8_lossy(&output.stderr).trim().to_string()));
        }
        let counters = parse_perf_csv(&String::from_utf8_lossy(&output.stderr));

        let stat_after = fs::read_to_string(self.procfs.join("stat")).unwrap_or_default();
        let rapl_after = read_rapl(&self.sysfs);
        let idle_after = read_cpuidle(&self.sysfs, cpus);

        let power = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) if b >= a => Some((b - a) / 1e6 / duration),
            _ => None,
        };
        let (b0, t0) = parse_proc_stat(&stat_before, cpus);
        let (b1, t1) = parse_proc_stat(&stat_after, cpus);
        let cpu_load = (t1 > t0).then(|| (b1 - b0) as f64 / (t1 - t0) as f64);
        let span_us = duration * 1e6 * cpus.len().max(1) as f64;
        let cstate_residency = idle_after
            .iter()
            .filter_map(|(k, v)| idle_before.get(k).map(|b| (k.clone(), ((v - b) / span_us).clamp(0.0, 1.0))))
            .collect();

        Ok(RawWindow {
            system: SystemMetrics {
                counters,
                ipc: None,
                package_power_w: power(rapl_before.package_uj, rapl_after.package_uj),
                dram_power_w: power(rapl_before.dram_uj, rapl_after.dram_uj),
                cstate_residency,
                cpu_load,
                window_seconds: duration,
            },
            app_output: self.read_app_output(),
        })
    }
}
