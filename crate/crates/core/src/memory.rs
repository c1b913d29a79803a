//! Cross-run memory: per-session traces with embeddings, nearest-neighbour
//! retrieval and warm-start prior synthesis.
//!
//! The prior is prompt text only. Live measurements override it simply by
//! appearing later in the same prompt; nothing here feeds the guardrail.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{Goal, PromptState, RequestKind, ResponseSchema};
use crate::gateway::{Gateway, Role};
use crate::registry::KnobValue;
use crate::telemetry::MeasurementRecord;

type Assign = BTreeMap<String, KnobValue>;

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("run `{0}` is already stored")]
    Duplicate(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad record {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("embedding: {0}")]
    Embedding(String),
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    #[default]
    Off,
    Top1,
    Top3,
}

impl MemoryMode {
    pub fn k(self) -> Option<usize> {
        match self {
            MemoryMode::Off => None,
            MemoryMode::Top1 => Some(1),
            MemoryMode::Top3 => Some(3),
        }
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError>;
}

pub fn l2_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic feature-hashing embedder. Tokens are hashed with FNV-1a
/// (stable across platforms and releases, unlike the std hasher); numeric
/// values additionally emit a coarse log-scale bucket feature so nearby
/// measurements land on shared dimensions.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(feature.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % self.dim as u64) as usize] += sign * weight;
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        let mut v = vec![0.0; self.dim.max(1)];
        for token in text.split(|c: char| c.is_whitespace() || c == ',' || c == ';') {
            let token = token.trim_matches(|c: char| "()[]{}:".contains(c));
            if token.is_empty() {
                continue;
            }
            match token.split_once('=') {
                Some((key, value)) => {
                    self.add(&mut v, key, 1.0);
                    match value.parse::<f64>() {
                        Ok(x) => {
                            let bucket = if x == 0.0 { 0 } else { (x.abs().log10() * 4.0).round() as i64 };
                            self.add(&mut v, &format!("{key}~{bucket}"), 1.0);
                        }
                        Err(_) => self.add(&mut v, token, 1.0),
                    }
                }
                None => self.add(&mut v, token, 1.0),
            }
        }
        Ok(l2_normalize(v))
    }
}

/// OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbedder {
    pub base_url: String,
    pub model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: &str, api_key_env: Option<&str>, timeout_s: f64) -> Result<Self, MemoryError> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| MemoryError::Embedding(format!("{var} is not set")))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs_f64(timeout_s)))
            .build()
            .into();
        Ok(Self { base_url: base_url.trim_end_matches('/').to_string(), model: model.to_string(), api_key, agent })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        let mut req = self.agent.post(&format!("{}/embeddings", self.base_url)).content_type("application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let body = serde_json::json!({"model": self.model, "input": text}).to_string();
        let mut resp = req.send(body).map_err(|e| MemoryError::Embedding(e.to_string()))?;
        let text = resp.body_mut().read_to_string().map_err(|e| MemoryError::Embedding(e.to_string()))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| MemoryError::Embedding(e.to_string()))?;
        let vec = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| MemoryError::Embedding("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(0.0))
            .collect();
        Ok(l2_normalize(vec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub window: u64,
    pub action: Assign,
    pub config: Assign,
    pub system: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub app: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Workload label, used to hold out same-workload runs.
    pub workload: String,
    pub goal: String,
    pub machine: String,
    pub start_config: Assign,
    pub trace: Vec<TraceEntry>,
    pub summary: String,
    #[serde(default)]
    pub embedding: Vec<f64>,
}

/// System signature fields used in queries: everything but raw counters,
/// app metrics and the reward.
fn system_signature(flat: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    flat.iter()
        .filter(|(k, _)| !k.starts_with("counters.") && !k.starts_with("app.") && *k != "reward")
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

fn render_pairs<V: std::fmt::Display>(m: &BTreeMap<String, V>) -> String {
    m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
}

fn query_text(goal: &str, machine: &str, start: &Assign, system: &BTreeMap<String, f64>, app: &BTreeMap<String, f64>) -> String {
    let mut q = format!("goal: {goal}\nmachine: {machine}\nstart: {}\nsignature: {}\n", render_pairs(start), render_pairs(system));
    if !app.is_empty() {
        q.push_str(&format!("app: {}\n", render_pairs(app)));
    }
    q
}

/// Retrieval query built after the first window.
pub fn bootstrap_query(goal: &Goal, machine: &str, start: &Assign, first: &MeasurementRecord) -> String {
    let flat = first.flat_fields();
    let app = first.app.as_ref().map(|a| a.values.clone()).unwrap_or_default();
    query_text(&goal.render(), machine, start, &system_signature(&flat), &app)
}

impl RunRecord {
    /// The record's own bootstrap-style signature, used for its embedding.
    pub fn signature_query(&self) -> String {
        let (system, app) = self.trace.first().map(|t| (t.system.clone(), t.app.clone())).unwrap_or_default();
        query_text(&self.goal, &self.machine, &self.start_config, &system_signature(&system), &app)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexLine {
    run_id: String,
    vector: Vec<f64>,
}

/// Linear-scan vector store; on disk as `runs/<id>.json` plus `index.jsonl`.
#[derive(Debug, Default)]
pub struct MemoryStore {
    dir: Option<PathBuf>,
    index: Vec<IndexLine>,
    records: BTreeMap<String, RunRecord>,
}

impl MemoryStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: &Path) -> Result<Self, MemoryError> {
        fs::create_dir_all(dir.join("runs"))?;
        let mut store = Self { dir: Some(dir.to_path_buf()), ..Self::default() };
        let index_path = dir.join("index.jsonl");
        if index_path.exists() {
            for line in fs::read_to_string(&index_path)?.lines().filter(|l| !l.trim().is_empty()) {
                let entry: IndexLine = serde_json::from_str(line).map_err(|e| MemoryError::Corrupt {
                    path: index_path.display().to_string(),
                    message: e.to_string(),
                })?;
                let path = dir.join("runs").join(format!("{}.json", entry.run_id));
                let record: RunRecord = serde_json::from_str(&fs::read_to_string(&path)?)
                    .map_err(|e| MemoryError::Corrupt { path: path.display().to_string(), message: e.to_string() })?;
                store.records.insert(entry.run_id.clone(), record);
                store.index.push(entry);
            }
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, run_id: &str) -> Option<&RunRecord> {
        self.records.get(run_id)
    }

    fn add(&mut self, record: RunRecord) -> Result<(), MemoryError> {
        if self.records.contains_key(&record.run_id) {
            return Err(MemoryError::Duplicate(record.run_id));
        }
        let entry = IndexLine { run_id: record.run_id.clone(), vector: record.embedding.clone() };
        if let Some(dir) = &self.dir {
            let path = dir.join("runs").join(format!("{}.json", record.run_id));
            fs::write(&path, serde_json::to_string_pretty(&record).expect("record serializes"))?;
            let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("index.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&entry).expect("index serializes"))?;
        }
        self.records.insert(record.run_id.clone(), record);
        self.index.push(entry);
        Ok(())
    }

    /// Top `k` runs by cosine similarity (vectors are unit length, so dot
    /// product), most similar first; ties keep insertion order.
    pub fn query(&self, vector: &[f64], k: usize, exclude_workload: Option<&str>) -> Vec<(&RunRecord, f64)> {
        let mut scored: Vec<(&RunRecord, f64)> = self
            .index
            .iter()
            .map(|e| (&self.records[&e.run_id], dot(vector, &e.vector)))
            .filter(|(r, _)| exclude_workload.is_none_or(|w| r.workload != w))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        scored
    }
}

/// Embeds the record's own signature and persists it.
pub fn store_run(store: &mut MemoryStore, embedder: &dyn Embedder, mut record: RunRecord) -> Result<(), MemoryError> {
    record.embedding = embedder.embed(&record.signature_query())?;
    store.add(record)
}

pub fn retrieve(
    store: &MemoryStore,
    embedder: &dyn Embedder,
    query: &str,
    k: usize,
    exclude_workload: Option<&str>,
) -> Result<Vec<RunRecord>, MemoryError> {
    if k == 0 {
        return Err(MemoryError::ZeroK);
    }
    if store.is_empty() {
        return Ok(Vec::new());
    }
    let v = embedder.embed(query)?;
    Ok(store.query(&v, k, exclude_workload).into_iter().map(|(r, _)| r.clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPrior {
    pub text: String,
    pub source_run_ids: Vec<String>,
    pub created_at: f64,
}

/// Prompt asking the reasoning endpoint to compress retrieved runs.
pub fn prior_prompt(goal: &Goal, runs: &[RunRecord]) -> String {
    let mut p = String::from(
        "## Role\nYou summarize earlier tuning sessions into a short, reusable prior for a new session.\n\n",
    );
    p.push_str(&format!("## Goal\n{}\n\n## Prior runs\n", goal.render()));
    for r in runs {
        p.push_str(&format!("### {} ({})\n{}\n", r.run_id, r.workload, r.summary));
    }
    let state = PromptState {
        request: RequestKind::SynthesizePrior,
        window: None,
        tuning_windows: 0,
        metric: goal.metric.clone(),
        direction: goal.direction,
        measured: Assign::new(),
        current: Assign::new(),
        reward: None,
        noise_pct: None,
        signals: BTreeMap::new(),
        best: None,
        ranges: BTreeMap::new(),
        frozen: Assign::new(),
        ordering: Vec::new(),
    };
    p.push_str("\n## Request\nReply with one JSON object whose \"justification\" field is the prior text (at most a few sentences); leave \"updates\" empty.\n");
    p.push_str(&format!("State: {}\n", serde_json::to_string(&state).expect("state serializes")));
    p
}

/// One reasoning request. Any failure means no prior.
pub fn synthesize_prior(goal: &Goal, runs: &[RunRecord], gateway: &Gateway, now: f64) -> (String, Option<MemoryPrior>) {
    let prompt = prior_prompt(goal, runs);
    if runs.is_empty() {
        return (prompt, None);
    }
    let resp = gateway.request(Role::Reasoning, &prompt, &ResponseSchema { fields: Vec::new() });
    let text = resp.justification.trim().to_string();
    let prior = (!resp.errored && !text.is_empty()).then(|| MemoryPrior {
        text,
        source_run_ids: runs.iter().map(|r| r.run_id.clone()).collect(),
        created_at: now,
    });
    (prompt, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{shared, ScriptedBackend};
    use crate::registry::Registry;
    use crate::telemetry::{AppMetrics, Direction, Reducer, SystemMetrics};

    fn record(i: usize) -> RunRecord {
        let system = BTreeMap::from([
            ("ipc".to_string(), 0.5 + (i % 13) as f64 * 0.1),
            ("power.pkg_w".to_string(), 20.0 + (i % 7) as f64 * 5.0),
        ]);
        RunRecord {
            run_id: format!("run{i:03}"),
            workload: format!("w{}", i % 5),
            goal: if i % 2 == 0 { "minimize p99_ms".into() } else { "maximize ops".into() },
            machine: format!("host{}", i % 3),
            start_config: BTreeMap::from([("min_perf_pct".to_string(), KnobValue::Int((i % 4) as i64 * 10))]),
            trace: vec![TraceEntry { window: 0, action: Assign::new(), config: Assign::new(), system, app: BTreeMap::new() }],
            summary: format!("run {i} summary"),
            embedding: Vec::new(),
        }
    }

    #[test]
    fn retrieval_matches_brute_force() {
        let e = HashEmbedder::default();
        let mut store = MemoryStore::in_memory();
        for i in 0..100 {
            store_run(&mut store, &e, record(i)).unwrap();
        }
        assert_eq!(store.len(), 100);
        for qi in [0usize, 17, 42, 99] {
            let q = record(qi).signature_query() + "extra=1";
            let got: Vec<String> = retrieve(&store, &e, &q, 3, None).unwrap().into_iter().map(|r| r.run_id).collect();
            let qv = e.embed(&q).unwrap();
            let mut brute: Vec<(usize, f64)> = (0..100)
                .map(|i| {
                    let v = e.embed(&record(i).signature_query()).unwrap();
                    let n = (dot(&qv, &qv) * dot(&v, &v)).sqrt();
                    (i, dot(&qv, &v) / n)
                })
                .collect();
            brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<String> = brute[..3].iter().map(|(i, _)| format!("run{i:03}")).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn self_retrieval_duplicates_and_small_stores() {
        let e = HashEmbedder::default();
        let mut store = MemoryStore::in_memory();
        assert!(retrieve(&store, &e, "anything", 3, None).unwrap().is_empty());
        store_run(&mut store, &e, record(1)).unwrap();
        store_run(&mut store, &e, record(2)).unwrap();
        assert!(matches!(store_run(&mut store, &e, record(1)), Err(MemoryError::Duplicate(_))));
        let got = retrieve(&store, &e, &record(2).signature_query(), 3, None).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].run_id, "run002");
        let held_out = retrieve(&store, &e, &record(2).signature_query(), 3, Some("w2")).unwrap();
        assert_eq!(held_out.len(), 1);
    }

    #[test]
    fn store_persists() {
        let dir = tempfile::tempdir().unwrap();
        let e = HashEmbedder::default();
        {
            let mut s = MemoryStore::open(dir.path()).unwrap();
            for i in 0..5 {
                store_run(&mut s, &e, record(i)).unwrap();
            }
        }
        let s = MemoryStore::open(dir.path()).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.get("run003").unwrap().summary, "run 3 summary");
    }

    #[test]
    fn bootstrap_query_sections() {
        let goal = Goal { metric: "p99_ms".into(), direction: Direction::Min, constraints: vec![] };
        let start = BTreeMap::from([("cstate_max".to_string(), KnobValue::Token("C6".into()))]);
        let mut rec = MeasurementRecord {
            window_index: 0,
            timestamp: 0.0,
            system: SystemMetrics { ipc: Some(1.2), ..SystemMetrics::default() },
            app: None,
            reward: None,
            noise_pct: None,
        };
        let q = bootstrap_query(&goal, "m", &start, &rec);
        assert!(!q.contains("app:"));
        assert_eq!(q, bootstrap_query(&goal, "m", &start, &rec));
        rec.app = Some(AppMetrics { values: BTreeMap::from([("p99_ms".to_string(), 12.5)]), reducer_used: Reducer::Median });
        assert!(bootstrap_query(&goal, "m", &start, &rec).contains("app: p99_ms=12.5"));
    }

    #[test]
    fn prior_synthesis() {
        let reg = Registry::builtin();
        let goal = Goal { metric: "p99_ms".into(), direction: Direction::Min, constraints: vec![] };
        let runs: Vec<RunRecord> = (0..3).map(record).collect();
        let script = r#"{"role": "reasoning", "reply": {"updates": {}, "justification": "keep cstate shallow"}}"#;
        let g = Gateway::new().with_backend(Role::Reasoning, shared(ScriptedBackend::parse(script, &reg, 0).unwrap()));
        let (prompt, prior) = synthesize_prior(&goal, &runs, &g, 1.0);
        for r in &runs {
            assert!(prompt.contains(&r.summary));
        }
        let prior = prior.unwrap();
        assert_eq!(prior.text, "keep cstate shallow");
        assert_eq!(prior.source_run_ids.len(), 3);
        // exhausted script: no prior
        let (_, none) = synthesize_prior(&goal, &runs, &g, 2.0);
        assert!(none.is_none());
    }
}
