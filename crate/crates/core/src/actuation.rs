//! Actuation backends: where knob values are actually read and written.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ActuationError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: no such control")]
    Missing { path: String },
    #[error("{path}: injected write failure")]
    Injected { path: String },
}

impl ActuationError {
    pub fn path(&self) -> &str {
        match self {
            ActuationError::Io { path, .. }
            | ActuationError::Missing { path }
            | ActuationError::Injected { path } => path,
        }
    }
}

/// Raw read/write access to OS controls. Values are passed without the
/// trailing newline; file-backed implementations add it on write.
pub trait ActuationBackend: Send + Sync {
    fn read(&self, path: &str) -> Result<String, ActuationError>;
    fn write(&self, path: &str, raw: &str) -> Result<(), ActuationError>;

    /// Marks the start of a write batch; used for audit tagging only.
    fn begin_batch(&self, _tag: &str) {}

    fn kind(&self) -> &'static str;
}

/// Writes plain text files under `root` (normally `/`): procfs sysctl keys,
/// sysfs, debugfs, cpufreq and intel_pstate controls alike.
#[derive(Debug, Clone)]
pub struct LinuxFiles {
    root: PathBuf,
}

impl LinuxFiles {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn host() -> Self {
        Self::new("/")
    }

    fn resolve(&self, path: &str) -> PathBuf {
        self.root.join(path.trim_start_matches('/'))
    }
}

impl ActuationBackend for LinuxFiles {
    fn read(&self, path: &str) -> Result<String, ActuationError> {
        let full = self.resolve(path);
        match fs::read_to_string(&full) {
            Ok(s) => Ok(s.trim_end().to_string()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(ActuationError::Missing { path: path.to_string() })
            }
            Err(e) => Err(ActuationError::Io { path: path.to_string(), message: e.to_string() }),
        }
    }

    fn write(&self, path: &str, raw: &str) -> Result<(), ActuationError> {
        fs::write(self.resolve(path), format!("{raw}\n"))
            .map_err(|e| ActuationError::Io { path: path.to_string(), message: e.to_string() })
    }

    fn kind(&self) -> &'static str {
        "linux"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteLogEntry {
    pub seq: u64,
    pub batch: String,
    pub path: String,
    pub value: String,
    pub ok: bool,
}

/// Failure injection for the simulated backend.
#[derive(Debug, Clone, Default)]
pub struct FailurePlan {
    /// 1-based write attempt numbers (counted across the backend's lifetime)
    /// that fail once.
    pub fail_attempts: BTreeSet<u64>,
    /// Paths whose writes always fail.
    pub persistent_paths: BTreeSet<String>,
    /// Paths whose reads fail.
    pub unreadable: BTreeSet<String>,
}

#[derive(Debug, Default)]
struct SimInner {
    values: BTreeMap<String, String>,
    log: Vec<WriteLogEntry>,
    attempts: u64,
    batch: String,
    plan: FailurePlan,
}

/// In-memory control map with a write log and optional injected failures.
#[derive(Debug, Default, Clone)]
pub struct SimulatedBackend {
    inner: Arc<Mutex<SimInner>>,
}

impl SimulatedBackend {
    pub fn new(values: BTreeMap<String, String>) -> Self {
        Self { inner: Arc::new(Mutex::new(SimInner { values, ..Default::default() })) }
    }

    pub fn set_failure_plan(&self, plan: FailurePlan) {
        self.inner.lock().unwrap().plan = plan;
    }

    pub fn failure_plan(&self) -> FailurePlan {
        self.inner.lock().unwrap().plan.clone()
    }

    pub fn state(&self) -> BTreeMap<String, String> {
        self.inner.lock().unwrap().values.clone()
    }

    /// Byte-exact dump of the control map, for state comparisons.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in self.inner.lock().unwrap().values.iter() {
            out.extend_from_slice(k.as_bytes());
            out.push(0);
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn write_log(&self) -> Vec<WriteLogEntry> {
        self.inner.lock().unwrap().log.clone()
    }

    pub fn write_attempts(&self) -> u64 {
        self.inner.lock().unwrap().attempts
    }

    /// Sets a value without going through the write path (test setup and
    /// external perturbation of the simulated host).
    pub fn poke(&self, path: &str, raw: &str) {
        self.inner.lock().unwrap().values.insert(path.to_string(), raw.to_string());
    }
}

impl ActuationBackend for SimulatedBackend {
    fn read(&self, path: &str) -> Result<String, ActuationError> {
        let inner = self.inner.lock().unwrap();
        if inner.plan.unreadable.contains(path) {
            return Err(ActuationError::Io { path: path.to_string(), message: "permission denied".into() });
        }
        inner.values.get(path).cloned().ok_or_else(|| ActuationError::Missing { path: path.to_string() })
    }

    fn write(&self, path: &str, raw: &str) -> Result<(), ActuationError> {
        let mut inner = self.inner.lock().unwrap();
        inner.attempts += 1;
        let attempt = inner.attempts;
        let fail = inner.plan.fail_attempts.contains(&attempt) || inner.plan.persistent_paths.contains(path);
        let missing = !inner.values.contains_key(path);
        let ok = !fail && !missing;
        let entry = WriteLogEntry {
            seq: attempt,
            batch: inner.batch.clone(),
            path: path.to_string(),
            value: raw.to_string(),
            ok,
        };
        inner.log.push(entry);
        if missing {
            return Err(ActuationError::Missing { path: path.to_string() });
        }
        if fail {
            return Err(ActuationError::Injected { path: path.to_string() });
        }
        inner.values.insert(path.to_string(), raw.to_string());
        Ok(())
    }

    fn begin_batch(&self, tag: &str) {
        self.inner.lock().unwrap().batch = tag.to_string();
    }

    fn kind(&self) -> &'static str {
        "sim"
    }
}

/// Dry-run backend: reads pass through to `inner`, writes land in an overlay
/// and the log, and the host is never touched.
pub struct NoopBackend {
    inner: Box<dyn ActuationBackend>,
    overlay: Mutex<BTreeMap<String, String>>,
    log: Mutex<Vec<(String, String)>>,
}

impl NoopBackend {
    pub fn new(inner: Box<dyn ActuationBackend>) -> Self {
        Self { inner, overlay: Mutex::new(BTreeMap::new()), log: Mutex::new(Vec::new()) }
    }

    pub fn suppressed_writes(&self) -> Vec<(String, String)> {
        self.log.lock().unwrap().clone()
    }
}

impl ActuationBackend for NoopBackend {
    fn read(&self, path: &str) -> Result<String, ActuationError> {
        if let Some(v) = self.overlay.lock().unwrap().get(path) {
            return Ok(v.clone());
        }
        self.inner.read(path)
    }

    fn write(&self, path: &str, raw: &str) -> Result<(), ActuationError> {
        self.overlay.lock().unwrap().insert(path.to_string(), raw.to_string());
        self.log.lock().unwrap().push((path.to_string(), raw.to_string()));
        Ok(())
    }

    fn kind(&self) -> &'static str {
        "noop"
    }
}
