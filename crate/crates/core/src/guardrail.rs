//! The authority boundary between model proposals and the host.
//!
//! Proposals are validated against the tunable set, declared and active
//! domains, hard ordering rules and the session policy. Accepted updates are
//! applied as one batch under a host-wide lock; a failed write rolls back
//! every write already performed in the batch.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{ActuationBackend, ActuationError};
use crate::clock::Clock;
use crate::registry::{Configuration, KnobSet, KnobSpec, KnobValue, RuleKind, Scope, CPU_PLACEHOLDER};

#[derive(Debug, Error, PartialEq)]
pub enum GuardrailError {
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("empty cpu mask")]
    EmptyMask,
    #[error("cannot read {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("cannot parse {path}: {raw:?}")]
    Unparseable { path: String, raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Instant,
    Reasoning,
    Baseline,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub updates: BTreeMap<String, KnobValue>,
    pub justification: String,
    pub source: ProposalSource,
    pub iteration: u64,
}

impl Proposal {
    pub fn new(source: ProposalSource, iteration: u64) -> Self {
        Self { updates: BTreeMap::new(), justification: String::new(), source, iteration }
    }

    pub fn with(mut self, knob: &str, value: KnobValue) -> Self {
        self.updates.insert(knob.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnknownKnob,
    OutOfDomain,
    OutOfActiveRange,
    DependencyViolation,
    PolicyViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub knob: String,
    pub reason: RejectReason,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub accepted: BTreeMap<String, KnobValue>,
    pub rejections: Vec<Rejection>,
}

impl ValidationVerdict {
    pub fn rejected(&self, knob: &str) -> Option<RejectReason> {
        self.rejections.iter().find(|r| r.knob == knob).map(|r| r.reason)
    }
}

/// Session policy beyond the knob set itself. Trimming installs frozen knobs
/// here; narrowed ranges live on the [`KnobSet`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionPolicy {
    pub frozen: BTreeMap<String, KnobValue>,
}

/// Partitions every proposed update into accepted values and rejections.
/// Pure: no I/O, no hidden state.
pub fn validate(
    proposal: &Proposal,
    set: &KnobSet,
    current: &Configuration,
    policy: &SessionPolicy,
) -> ValidationVerdict {
    let mut verdict = ValidationVerdict::default();
    let reject = |v: &mut ValidationVerdict, knob: &str, reason, message: String| {
        v.rejections.push(Rejection { knob: knob.to_string(), reason, message });
    };

    // Set order first, unknown names after (in map order).
    let ordered: Vec<(&String, &KnobValue)> = set
        .names()
        .filter_map(|n| proposal.updates.get_key_value(n))
        .chain(proposal.updates.iter().filter(|(k, _)| set.get(k).is_none()))
        .collect();

    for (name, value) in ordered {
        let Some(spec) = set.get(name) else {
            reject(&mut verdict, name, RejectReason::UnknownKnob, format!("`{name}` is not in the tunable set"));
            continue;
        };
        if let Some(fixed) = policy.frozen.get(name) {
            if fixed != value {
                reject(
                    &mut verdict,
                    name,
                    RejectReason::PolicyViolation,
                    format!("`{name}` is frozen at {fixed}"),
                );
                continue;
            }
        }
        let Some(ordinal) = spec.ordinal(value) else {
            reject(
                &mut verdict,
                name,
                RejectReason::OutOfDomain,
                format!("{value} is outside {}", spec.domain_text(&spec.declared_range())),
            );
            continue;
        };
        let active = set.active_range(name).expect("member has a range");
        if !active.contains(ordinal) {
            reject(
                &mut verdict,
                name,
                RejectReason::OutOfActiveRange,
                format!("{value} is outside active range {}", spec.domain_text(&active)),
            );
            continue;
        }
        verdict.accepted.insert(name.clone(), value.clone());
    }

    // Ordering rules on the merged state; a violation rejects every proposed
    // member of the rule. Repeat until no rule changes the accepted set.
    loop {
        let mut changed = false;
        for rule in set.rules().iter().filter(|r| r.kind == RuleKind::Ordering) {
            let (lhs, rhs) = (&rule.members[0], &rule.members[1]);
            let merged = |k: &String| verdict.accepted.get(k).or_else(|| current.get(k)).cloned();
            let (Some(KnobValue::Int(a)), Some(KnobValue::Int(b))) = (merged(lhs), merged(rhs)) else {
                continue;
            };
            if a <= b {
                continue;
            }
            for member in [lhs, rhs] {
                if verdict.accepted.remove(member).is_some() {
                    changed = true;
                    verdict.rejections.push(Rejection {
                        knob: member.clone(),
                        reason: RejectReason::DependencyViolation,
                        message: format!("rule {}: {lhs}={a} > {rhs}={b}", rule.id),
                    });
                }
            }
        }
        if !changed {
            break;
        }
    }
    verdict
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedWrite {
    pub knob: String,
    pub path: String,
    pub value: String,
}

/// One write per cpu in ascending index order with the placeholder substituted.
pub fn expand_per_cpu(
    spec: &KnobSpec,
    value: &KnobValue,
    mask: &BTreeSet<usize>,
) -> Result<Vec<PlannedWrite>, GuardrailError> {
    if spec.scope != Scope::PerCpu {
        return Err(GuardrailError::ContractViolation(format!("`{}` is host-wide", spec.name)));
    }
    if mask.is_empty() {
        return Err(GuardrailError::EmptyMask);
    }
    let raw = spec.format_raw(value);
    Ok(mask
        .iter()
        .map(|cpu| PlannedWrite {
            knob: spec.name.clone(),
            path: spec.path.replace(CPU_PLACEHOLDER, &cpu.to_string()),
            value: raw.clone(),
        })
        .collect())
}

/// All backend paths a knob touches under `mask`.
pub fn knob_paths(spec: &KnobSpec, mask: &BTreeSet<usize>) -> Vec<String> {
    match spec.scope {
        Scope::Host => vec![spec.path.clone()],
        Scope::PerCpu => mask.iter().map(|c| spec.path.replace(CPU_PLACEHOLDER, &c.to_string())).collect(),
    }
}

/// Writes for `updates` in set order, then cpu order.
pub fn plan_writes(
    updates: &BTreeMap<String, KnobValue>,
    set: &KnobSet,
    mask: &BTreeSet<usize>,
) -> Result<Vec<PlannedWrite>, GuardrailError> {
    let mut writes = Vec::new();
    for spec in set.members() {
        let Some(value) = updates.get(&spec.name) else { continue };
        match spec.scope {
            Scope::Host => writes.push(PlannedWrite {
                knob: spec.name.clone(),
                path: spec.path.clone(),
                value: spec.format_raw(value),
            }),
            Scope::PerCpu => writes.extend(expand_per_cpu(spec, value, mask)?),
        }
    }
    if let Some(stray) = updates.keys().find(|k| set.get(k).is_none()) {
        return Err(GuardrailError::ContractViolation(format!("`{stray}` is not in the tunable set")));
    }
    Ok(writes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum WriteOutcome {
    Ok,
    Failed(String),
    RolledBack,
    RollbackFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub path: String,
    pub value: String,
    pub outcome: WriteOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub commit_id: u64,
    pub writes: Vec<WriteRecord>,
    pub started: f64,
    pub finished: f64,
    pub resulting_config: Option<Configuration>,
    pub justification: String,
    /// Paths whose final state could not be brought to the target value.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residual: Vec<String>,
}

impl CommitRecord {
    pub fn succeeded(&self) -> bool {
        self.resulting_config.is_some()
    }
}

/// Raw per-path state captured at session start, plus its parsed configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostSnapshot {
    pub config: Configuration,
    pub raw: BTreeMap<String, String>,
}

/// Owner of all backend writes. Every change to the host goes through
/// [`Actuator::apply`] or [`Actuator::restore`], serialized by one lock.
pub struct Actuator {
    backend: Arc<dyn ActuationBackend>,
    clock: Arc<dyn Clock>,
    mask: BTreeSet<usize>,
    lock: Mutex<()>,
}

impl Actuator {
    pub fn new(backend: Arc<dyn ActuationBackend>, clock: Arc<dyn Clock>, mask: BTreeSet<usize>) -> Self {
        Self { backend, clock, mask, lock: Mutex::new(()) }
    }

    pub fn mask(&self) -> &BTreeSet<usize> {
        &self.mask
    }

    pub fn backend_kind(&self) -> &'static str {
        self.backend.kind()
    }

    pub fn snapshot(&self, set: &KnobSet) -> Result<HostSnapshot, GuardrailError> {
        snapshot(set, self.backend.as_ref(), &self.mask)
    }

    /// Applies `accepted` (the output of [`validate`] against `current`).
    pub fn apply(
        &self,
        accepted: &BTreeMap<String, KnobValue>,
        set: &KnobSet,
        current: &Configuration,
        justification: &str,
    ) -> Result<CommitRecord, GuardrailError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let started = self.clock.now();
        let plan = plan_writes(accepted, set, &self.mask)?;
        if plan.is_empty() {
            return Ok(CommitRecord {
                commit_id: current.commit_id,
                writes: Vec::new(),
                started,
                finished: started,
                resulting_config: Some(current.clone()),
                justification: justification.to_string(),
                residual: Vec::new(),
            });
        }
        let next_id = current.commit_id + 1;
        self.backend.begin_batch(&format!("commit:{next_id}"));

        let mut records = Vec::with_capacity(plan.len());
        let mut done: Vec<(String, String)> = Vec::new();
        let mut failed = false;
        for w in &plan {
            let previous = match self.backend.read(&w.path) {
                Ok(v) => v,
                Err(e) => {
                    records.push(WriteRecord {
                        path: w.path.clone(),
                        value: w.value.clone(),
                        outcome: WriteOutcome::Failed(e.to_string()),
                    });
                    failed = true;
                    break;
                }
            };
            match self.backend.write(&w.path, &w.value) {
                Ok(()) => {
                    records.push(WriteRecord { path: w.path.clone(), value: w.value.clone(), outcome: WriteOutcome::Ok });
                    done.push((w.path.clone(), previous));
                }
                Err(e) => {
                    records.push(WriteRecord {
                        path: w.path.clone(),
                        value: w.value.clone(),
                        outcome: WriteOutcome::Failed(e.to_string()),
                    });
                    failed = true;
                    break;
                }
            }
        }

        let mut residual = Vec::new();
        if failed {
            self.backend.begin_batch(&format!("rollback:{next_id}"));
            for (i, (path, previous)) in done.iter().enumerate().rev() {
                let outcome = match write_with_retry(self.backend.as_ref(), path, previous) {
                    Ok(()) => WriteOutcome::RolledBack,
                    Err(e) => {
                        residual.push(path.clone());
                        WriteOutcome::RollbackFailed(e.to_string())
                    }
                };
                records[i].outcome = outcome;
            }
        }

        let resulting_config = (!failed).then(|| {
            let mut cfg = current.clone();
            for (k, v) in accepted {
                cfg.assignments.insert(k.clone(), v.clone());
            }
            cfg.commit_id = next_id;
            cfg.timestamp = self.clock.now();
            cfg
        });
        Ok(CommitRecord {
            commit_id: if failed { current.commit_id } else { next_id },
            writes: records,
            started,
            finished: self.clock.now(),
            resulting_config,
            justification: justification.to_string(),
            residual,
        })
    }

    /// Brings every snapshotted path back to its original raw value. Paths
    /// already at their original value are not written.
    pub fn restore(&self, snapshot: &HostSnapshot) -> CommitRecord {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let started = self.clock.now();
        self.backend.begin_batch("restore");
        let mut writes = Vec::new();
        let mut residual = Vec::new();
        for (path, original) in &snapshot.raw {
            if self.backend.read(path).is_ok_and(|v| v.trim() == original.trim()) {
                continue;
            }
            let outcome = match write_with_retry(self.backend.as_ref(), path, original) {
                Ok(()) => WriteOutcome::Ok,
                Err(e) => {
                    residual.push(path.clone());
                    WriteOutcome::Failed(e.to_string())
                }
            };
            writes.push(WriteRecord { path: path.clone(), value: original.clone(), outcome });
        }
        let resulting_config = residual.is_empty().then(|| snapshot.config.clone());
        CommitRecord {
            commit_id: snapshot.config.commit_id,
            writes,
            started,
            finished: self.clock.now(),
            resulting_config,
            justification: "restore session-start settings".to_string(),
            residual,
        }
    }
}

fn write_with_retry(backend: &dyn ActuationBackend, path: &str, raw: &str) -> Result<(), ActuationError> {
    backend.write(path, raw).or_else(|_| backend.write(path, raw))
}

/// Reads the current value of every knob in the set. Per-cpu knobs report
/// the value of the lowest cpu in the mask; the raw map keeps every path.
pub fn snapshot(
    set: &KnobSet,
    backend: &dyn ActuationBackend,
    mask: &BTreeSet<usize>,
) -> Result<HostSnapshot, GuardrailError> {
    if mask.is_empty() && set.members().iter().any(|k| k.scope == Scope::PerCpu) {
        return Err(GuardrailError::EmptyMask);
    }
    let mut raw = BTreeMap::new();
    let mut assignments = BTreeMap::new();
    for spec in set.members() {
        for (i, path) in knob_paths(spec, mask).into_iter().enumerate() {
            let value = backend
                .read(&path)
                .map_err(|e| GuardrailError::Unreadable { path: path.clone(), message: e.to_string() })?;
            let parsed = spec
                .parse_raw(&value)
                .ok_or_else(|| GuardrailError::Unparseable { path: path.clone(), raw: value.clone() })?;
            if i == 0 {
                assignments.insert(spec.name.clone(), parsed);
            }
            raw.insert(path, value);
        }
    }
    Ok(HostSnapshot { config: Configuration { assignments, commit_id: 0, timestamp: 0.0 }, raw })
}

/// One audit record per proposal: what was asked, what was decided, what happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub window: u64,
    pub proposal: Proposal,
    pub verdict: ValidationVerdict,
    pub commit: Option<CommitRecord>,
    /// Model-suggested commands; recorded, never executed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quarantined_commands: Vec<String>,
}

/// Append-only line-delimited JSON audit log.
pub struct AuditLog {
    sink: Option<BufWriter<File>>,
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self { sink: None, records: Vec::new() }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { sink: Some(BufWriter::new(file)), records: Vec::new() })
    }

    pub fn append(&mut self, record: AuditRecord) -> std::io::Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            serde_json::to_writer(&mut *sink, &record)?;
            sink.write_all(b"\n")?;
            sink.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuation::{FailurePlan, SimulatedBackend};
    use crate::clock::VirtualClock;
    use crate::registry::{Registry, ValueRange};

    fn default_set() -> KnobSet {
        Registry::builtin().resolve_set_spec("default").unwrap()
    }

    fn current_with(set: &KnobSet, overrides: &[(&str, i64)]) -> Configuration {
        let mut c = set.default_configuration().unwrap();
        for (k, v) in overrides {
            c.assignments.insert(k.to_string(), KnobValue::Int(*v));
        }
        c
    }

    fn proposal(updates: &[(&str, KnobValue)]) -> Proposal {
        let mut p = Proposal::new(ProposalSource::Instant, 0);
        for (k, v) in updates {
            p.updates.insert(k.to_string(), v.clone());
        }
        p
    }

    fn sim_for(set: &KnobSet, mask: &BTreeSet<usize>) -> SimulatedBackend {
        let mut values = BTreeMap::new();
        for spec in set.members() {
            for p in knob_paths(spec, mask) {
                values.insert(p, spec.format_raw(&spec.default));
            }
        }
        SimulatedBackend::new(values)
    }

    #[test]
    fn inverted_perf_bounds_are_dependency_violations() {
        let set = default_set();
        let cur = current_with(&set, &[]);
        let v = validate(
            &proposal(&[("min_perf_pct", KnobValue::Int(70)), ("max_perf_pct", KnobValue::Int(10))]),
            &set,
            &cur,
            &SessionPolicy::default(),
        );
        assert!(v.accepted.is_empty());
        assert_eq!(v.rejected("min_perf_pct"), Some(RejectReason::DependencyViolation));
        assert_eq!(v.rejected("max_perf_pct"), Some(RejectReason::DependencyViolation));

        let cur = current_with(&set, &[("min_perf_pct", 20), ("max_perf_pct", 100)]);
        let v = validate(
            &proposal(&[("min_perf_pct", KnobValue::Int(63)), ("max_perf_pct", KnobValue::Int(3))]),
            &set,
            &cur,
            &SessionPolicy::default(),
        );
        assert!(v.accepted.is_empty());
        assert_eq!(v.rejections.len(), 2);
    }

    #[test]
    fn dependency_checked_against_merged_state() {
        let set = default_set();
        let cur = current_with(&set, &[("min_perf_pct", 50)]);
        let v = validate(
            &proposal(&[("max_perf_pct", KnobValue::Int(40)), ("napi_busy_poll", KnobValue::Int(50))]),
            &set,
            &cur,
            &SessionPolicy::default(),
        );
        assert_eq!(v.rejected("max_perf_pct"), Some(RejectReason::DependencyViolation));
        assert_eq!(v.accepted.get("napi_busy_poll"), Some(&KnobValue::Int(50)));
    }

    #[test]
    fn empty_and_out_of_domain_proposals() {
        let set = default_set();
        let cur = current_with(&set, &[]);
        let v = validate(&proposal(&[]), &set, &cur, &SessionPolicy::default());
        assert!(v.accepted.is_empty() && v.rejections.is_empty());

        let v = validate(
            &proposal(&[
                ("latency_ns", KnobValue::Int(100_000_001_000)),
                ("cstate_max", KnobValue::Token("C9".into())),
                ("reboot", KnobValue::Bool(true)),
                ("napi_busy_poll", KnobValue::Token("lots".into())),
            ]),
            &set,
            &cur,
            &SessionPolicy::default(),
        );
        assert_eq!(v.rejected("latency_ns"), Some(RejectReason::OutOfDomain));
        assert_eq!(v.rejected("cstate_max"), Some(RejectReason::OutOfDomain));
        assert_eq!(v.rejected("napi_busy_poll"), Some(RejectReason::OutOfDomain));
        assert_eq!(v.rejected("reboot"), Some(RejectReason::UnknownKnob));
    }

    #[test]
    fn policy_and_active_range_rejections() {
        let mut set = default_set();
        let cur = current_with(&set, &[("latency_ns", 6_000_000)]);
        set.set_active_range("latency_ns", ValueRange::new(5_000_000, 10_000_000)).unwrap();
        let policy = SessionPolicy { frozen: BTreeMap::from([("napi_busy_poll".to_string(), KnobValue::Int(0))]) };
        let v = validate(
            &proposal(&[("latency_ns", KnobValue::Int(20_000_000)), ("napi_busy_poll", KnobValue::Int(30))]),
            &set,
            &cur,
            &policy,
        );
        assert_eq!(v.rejected("latency_ns"), Some(RejectReason::OutOfActiveRange));
        assert_eq!(v.rejected("napi_busy_poll"), Some(RejectReason::PolicyViolation));
    }

    #[test]
    fn per_cpu_expansion() {
        let reg = Registry::builtin();
        let cstate = reg.get("cstate_max").unwrap();
        let mask: BTreeSet<usize> = (0..10).collect();
        let writes = expand_per_cpu(cstate, &KnobValue::Token("C1".into()), &mask).unwrap();
        assert_eq!(writes.len(), 10);
        for (i, w) in writes.iter().enumerate() {
            assert_eq!(w.path, format!("/sys/devices/system/cpu/cpu{i}/cpuidle/max_cstate"));
            assert_eq!(w.value, "C1");
        }
        let one = expand_per_cpu(cstate, &KnobValue::Token("C1".into()), &BTreeSet::from([3])).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].path.contains("cpu3"));
        assert_eq!(expand_per_cpu(cstate, &KnobValue::Token("C1".into()), &BTreeSet::new()), Err(GuardrailError::EmptyMask));
        assert!(matches!(
            expand_per_cpu(reg.get("latency_ns").unwrap(), &KnobValue::Int(1), &mask),
            Err(GuardrailError::ContractViolation(_))
        ));
    }

    #[test]
    fn apply_single_write_and_noop() {
        let set = default_set();
        let mask: BTreeSet<usize> = (0..4).collect();
        let sim = sim_for(&set, &mask);
        let act = Actuator::new(Arc::new(sim.clone()), Arc::new(VirtualClock::new()), mask);
        let cur = act.snapshot(&set).unwrap().config;
        assert_eq!(cur, set.default_configuration().unwrap());

        let none = act.apply(&BTreeMap::new(), &set, &cur, "nothing").unwrap();
        assert!(none.writes.is_empty());
        assert_eq!(none.commit_id, 0);

        let accepted = BTreeMap::from([("latency_ns".to_string(), KnobValue::Int(12_000_000))]);
        let rec = act.apply(&accepted, &set, &cur, "shorter period").unwrap();
        assert!(rec.succeeded());
        assert_eq!(rec.commit_id, 1);
        assert_eq!(sim.read("/sys/kernel/debug/sched/latency_ns").unwrap(), "12000000");
        assert_eq!(rec.resulting_config.unwrap().get("latency_ns"), Some(&KnobValue::Int(12_000_000)));
    }

    #[test]
    fn failed_batch_rolls_back_to_pre_batch_state() {
        let set = default_set();
        let mask: BTreeSet<usize> = (0..2).collect();
        let sim = sim_for(&set, &mask);
        let act = Actuator::new(Arc::new(sim.clone()), Arc::new(VirtualClock::new()), mask);
        let cur = set.default_configuration().unwrap();
        // 5 writes: latency, migration, cstate x2, busy_poll
        let accepted = BTreeMap::from([
            ("latency_ns".to_string(), KnobValue::Int(12_000_000)),
            ("migration_cost_ns".to_string(), KnobValue::Int(100_000)),
            ("cstate_max".to_string(), KnobValue::Token("C1".into())),
            ("napi_busy_poll".to_string(), KnobValue::Int(50)),
        ]);
        assert_eq!(plan_writes(&accepted, &set, act.mask()).unwrap().len(), 5);
        let before = sim.state_bytes();
        sim.set_failure_plan(FailurePlan { fail_attempts: [3].into(), ..Default::default() });
        let rec = act.apply(&accepted, &set, &cur, "batch").unwrap();
        assert!(!rec.succeeded());
        assert_eq!(rec.commit_id, 0);
        assert_eq!(sim.state_bytes(), before);
        assert_eq!(rec.writes[0].outcome, WriteOutcome::RolledBack);
        assert!(matches!(rec.writes[2].outcome, WriteOutcome::Failed(_)));
    }

    #[test]
    fn restore_reports_persistent_failures() {
        let set = default_set();
        let mask: BTreeSet<usize> = (0..2).collect();
        let sim = sim_for(&set, &mask);
        let act = Actuator::new(Arc::new(sim.clone()), Arc::new(VirtualClock::new()), mask);
        let snap = act.snapshot(&set).unwrap();
        let untouched = act.restore(&snap);
        assert!(untouched.writes.is_empty() && untouched.succeeded());

        let cur = snap.config.clone();
        let accepted = BTreeMap::from([
            ("latency_ns".to_string(), KnobValue::Int(12_000_000)),
            ("napi_busy_poll".to_string(), KnobValue::Int(50)),
        ]);
        act.apply(&accepted, &set, &cur, "x").unwrap();
        sim.set_failure_plan(FailurePlan {
            persistent_paths: ["/proc/sys/net/core/busy_poll".to_string()].into(),
            ..Default::default()
        });
        let rec = act.restore(&snap);
        assert_eq!(rec.residual, vec!["/proc/sys/net/core/busy_poll".to_string()]);
        assert!(!rec.succeeded());
        assert_eq!(sim.read("/sys/kernel/debug/sched/latency_ns").unwrap(), "24000000");
    }

    #[test]
    fn snapshot_errors_name_the_path() {
        let set = default_set();
        let mask: BTreeSet<usize> = (0..2).collect();
        let sim = sim_for(&set, &mask);
        sim.set_failure_plan(FailurePlan {
            unreadable: ["/proc/sys/net/core/busy_poll".to_string()].into(),
            ..Default::default()
        });
        match snapshot(&set, &sim, &mask) {
            Err(GuardrailError::Unreadable { path, .. }) => assert_eq!(path, "/proc/sys/net/core/busy_poll"),
            other => panic!("{other:?}"),
        }
        let sim = sim_for(&set, &mask);
        sim.poke("/sys/kernel/debug/sched/latency_ns", "banana");
        assert!(matches!(snapshot(&set, &sim, &mask), Err(GuardrailError::Unparseable { .. })));
        sim.poke("/sys/kernel/debug/sched/latency_ns", "12000000");
        let snap = snapshot(&set, &sim, &mask).unwrap();
        assert_eq!(snap.config.get("latency_ns"), Some(&KnobValue::Int(12_000_000)));
    }

    #[test]
    fn audit_log_appends_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let mut log = AuditLog::open(&path).unwrap();
        for w in 0..2 {
            log.append(AuditRecord {
                window: w,
                proposal: Proposal::new(ProposalSource::Manual, w),
                verdict: ValidationVerdict::default(),
                commit: None,
                quarantined_commands: vec!["reboot".into()],
            })
            .unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: AuditRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back.quarantined_commands, vec!["reboot".to_string()]);
    }
}
