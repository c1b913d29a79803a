//! Typed catalog of tunable OS knobs and the session tunable sets built from it.
//!
//! Every knob value maps onto an integer "ordinal": integer knobs use the
//! value itself, enumerated knobs the position of the token in their ordered
//! value list, and booleans 0/1. Active (narrowed) ranges are stored as
//! inclusive ordinal bounds, which keeps range checks uniform across kinds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The catalog shipped with the crate.
pub const BUILTIN_CATALOG: &str = include_str!("../data/catalog.toml");

/// Placeholder substituted by the cpu index in per-cpu actuation paths.
pub const CPU_PLACEHOLDER: &str = "{cpu}";

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("catalog parse error: {0}")]
    Parse(String),
    #[error("no knobs")]
    Empty,
    #[error("duplicate knob name `{0}`")]
    Duplicate(String),
    #[error("knob `{name}`: {reason}")]
    MalformedDomain { name: String, reason: String },
    #[error("knob `{name}`: default {value} outside declared domain")]
    DefaultOutOfDomain { name: String, value: String },
    #[error("knob `{name}`: {reason}")]
    BadPath { name: String, reason: String },
    #[error("rule `{rule}` references unknown knob `{member}`")]
    DanglingMember { rule: String, member: String },
    #[error("knob `{knob}` hints at unknown rule `{rule}`")]
    DanglingHint { knob: String, rule: String },
    #[error("ordering rule `{0}` must reference exactly two integer knobs")]
    BadOrderingRule(String),
    #[error("duplicate rule id `{0}`")]
    DuplicateRule(String),
    #[error("unknown knob `{0}`")]
    UnknownKnob(String),
    #[error("unknown knob set `{0}`")]
    UnknownSet(String),
    #[error("tunable set is empty")]
    EmptySet,
    #[error("knob `{0}` listed twice in tunable set")]
    DuplicateMember(String),
    #[error("knob `{name}`: default outside active range")]
    DefaultOutsideActiveRange { name: String },
    #[error("knob `{name}`: active range {lo}..={hi} not within declared domain")]
    RangeOutsideDomain { name: String, lo: i64, hi: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subsystem {
    Scheduler,
    Power,
    Idle,
    Network,
    Memory,
    Io,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "host")]
    Host,
    #[serde(rename = "per-cpu")]
    PerCpu,
}

/// A concrete knob value. Serialized untagged: integers as numbers,
/// booleans as booleans, enumeration members as their catalog token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnobValue {
    Bool(bool),
    Int(i64),
    Token(String),
}

impl fmt::Display for KnobValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KnobValue::Bool(b) => write!(f, "{b}"),
            KnobValue::Int(v) => write!(f, "{v}"),
            KnobValue::Token(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KnobKind {
    Int { min: i64, max: i64, step: i64, units: String },
    Enum { values: Vec<String> },
    Bool,
}

impl KnobKind {
    pub fn label(&self) -> &'static str {
        match self {
            KnobKind::Int { .. } => "int",
            KnobKind::Enum { .. } => "enum",
            KnobKind::Bool => "bool",
        }
    }

    /// Declared domain in ordinal space.
    pub fn ordinal_bounds(&self) -> (i64, i64) {
        match self {
            KnobKind::Int { min, max, .. } => (*min, *max),
            KnobKind::Enum { values } => (0, values.len() as i64 - 1),
            KnobKind::Bool => (0, 1),
        }
    }

    /// Distance between adjacent legal ordinals.
    pub fn ordinal_step(&self) -> i64 {
        match self {
            KnobKind::Int { step, .. } => *step,
            _ => 1,
        }
    }
}

/// Inclusive ordinal bounds of a knob's currently permitted values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: i64,
    pub hi: i64,
}

impl ValueRange {
    pub fn new(lo: i64, hi: i64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, ordinal: i64) -> bool {
        self.lo <= ordinal && ordinal <= self.hi
    }

    pub fn is_within(&self, outer: &ValueRange) -> bool {
        outer.lo <= self.lo && self.hi <= outer.hi && self.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnobSpec {
    pub name: String,
    pub subsystem: Subsystem,
    pub kind: KnobKind,
    pub scope: Scope,
    pub path: String,
    pub default: KnobValue,
    pub description: String,
    pub hints: Vec<String>,
}

impl KnobSpec {
    pub fn declared_range(&self) -> ValueRange {
        let (lo, hi) = self.kind.ordinal_bounds();
        ValueRange { lo, hi }
    }

    /// Maps a value onto its ordinal, or `None` if the value has the wrong
    /// shape or is not a legal member of the declared domain.
    pub fn ordinal(&self, value: &KnobValue) -> Option<i64> {
        match (&self.kind, value) {
            (KnobKind::Int { min, max, step, .. }, KnobValue::Int(v)) => {
                (min <= v && v <= max && (v - min) % step == 0).then_some(*v)
            }
            (KnobKind::Enum { values }, KnobValue::Token(t)) => {
                values.iter().position(|x| x == t).map(|i| i as i64)
            }
            (KnobKind::Bool, KnobValue::Bool(b)) => Some(i64::from(*b)),
            _ => None,
        }
    }

    /// Inverse of [`KnobSpec::ordinal`]. Ordinals are clamped into the domain
    /// and integer values are snapped down onto the step grid.
    pub fn from_ordinal(&self, ordinal: i64) -> KnobValue {
        let (lo, hi) = self.kind.ordinal_bounds();
        let o = ordinal.clamp(lo, hi);
        match &self.kind {
            KnobKind::Int { min, step, .. } => KnobValue::Int(min + (o - min) / step * step),
            KnobKind::Enum { values } => KnobValue::Token(values[o as usize].clone()),
            KnobKind::Bool => KnobValue::Bool(o != 0),
        }
    }

    /// Largest legal ordinal that is `<= ordinal` within `range`, if any.
    pub fn snap_into(&self, ordinal: i64, range: &ValueRange) -> Option<i64> {
        let step = self.kind.ordinal_step();
        let (dlo, _) = self.kind.ordinal_bounds();
        let o = ordinal.clamp(range.lo, range.hi);
        let down = dlo + (o - dlo).div_euclid(step) * step;
        if down >= range.lo {
            return Some(down);
        }
        let up = down + step;
        (up <= range.hi).then_some(up)
    }

    /// Number of legal values within `range`.
    pub fn count_in(&self, range: &ValueRange) -> i64 {
        let Some(first) = self.snap_into(range.lo, range) else {
            return 0;
        };
        let first = if first < range.lo { first + self.kind.ordinal_step() } else { first };
        if first > range.hi {
            return 0;
        }
        (range.hi - first) / self.kind.ordinal_step() + 1
    }

    /// Parses a raw backend string into a domain value.
    pub fn parse_raw(&self, raw: &str) -> Option<KnobValue> {
        let raw = raw.trim();
        let value = match &self.kind {
            KnobKind::Int { .. } => KnobValue::Int(raw.parse().ok()?),
            KnobKind::Enum { values } => {
                // Some sysfs files print all options with the active one bracketed.
                let token = match (raw.find('['), raw.find(']')) {
                    (Some(a), Some(b)) if a < b => &raw[a + 1..b],
                    _ => raw,
                };
                values.iter().find(|v| *v == token)?;
                KnobValue::Token(token.to_string())
            }
            KnobKind::Bool => match raw {
                "1" | "true" | "Y" | "y" => KnobValue::Bool(true),
                "0" | "false" | "N" | "n" => KnobValue::Bool(false),
                _ => return None,
            },
        };
        self.ordinal(&value).map(|_| value)
    }

    /// Renders a value in the form written to the backend (without newline).
    pub fn format_raw(&self, value: &KnobValue) -> String {
        match value {
            KnobValue::Bool(b) => if *b { "1" } else { "0" }.to_string(),
            KnobValue::Int(v) => v.to_string(),
            KnobValue::Token(t) => t.clone(),
        }
    }

    pub fn domain_text(&self, range: &ValueRange) -> String {
        match &self.kind {
            KnobKind::Int { step, units, .. } => {
                let units = if units.is_empty() { String::new() } else { format!(" {units}") };
                format!("[{}, {}] step {}{}", range.lo, range.hi, step, units)
            }
            KnobKind::Enum { values } => {
                let slice = &values[range.lo as usize..=range.hi as usize];
                format!("{{{}}} (ordered)", slice.join(", "))
            }
            KnobKind::Bool => {
                if range.lo == range.hi {
                    format!("{{{}}}", range.lo != 0)
                } else {
                    "{false, true}".to_string()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// `members[0] <= members[1]`, enforced by the guardrail.
    Ordering,
    /// Shown to the model only.
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyRule {
    pub id: String,
    pub kind: RuleKind,
    pub members: Vec<String>,
    pub description: String,
}

// ---------------------------------------------------------------------------
// Catalog file format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CatalogFile {
    #[serde(default)]
    sets: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    knob: Vec<KnobRecord>,
    #[serde(default)]
    rule: Vec<DependencyRule>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KnobRecord {
    name: String,
    subsystem: Subsystem,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    min: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    units: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
    scope: Scope,
    path: String,
    default: KnobValue,
    #[serde(default)]
    description: String,
    #[serde(default)]
    hints: Vec<String>,
}

impl KnobRecord {
    fn into_spec(self) -> Result<KnobSpec, RegistryError> {
        let malformed = |reason: &str| RegistryError::MalformedDomain {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        let kind = match self.kind.as_str() {
            "int" => {
                let (Some(min), Some(max)) = (self.min, self.max) else {
                    return Err(malformed("integer knob needs min and max"));
                };
                let step = self.step.unwrap_or(1);
                if min > max {
                    return Err(malformed("min > max"));
                }
                if step <= 0 {
                    return Err(malformed("step must be positive"));
                }
                KnobKind::Int { min, max, step, units: self.units.clone().unwrap_or_default() }
            }
            "enum" => {
                let values = self.values.clone().unwrap_or_default();
                if values.is_empty() {
                    return Err(malformed("empty enumeration"));
                }
                let unique: HashSet<_> = values.iter().collect();
                if unique.len() != values.len() {
                    return Err(malformed("duplicate enumeration token"));
                }
                KnobKind::Enum { values }
            }
            "bool" => KnobKind::Bool,
            other => return Err(malformed(&format!("unknown kind `{other}`"))),
        };
        let placeholders = self.path.matches(CPU_PLACEHOLDER).count();
        match (self.scope, placeholders) {
            (Scope::PerCpu, 1) | (Scope::Host, 0) => {}
            (Scope::PerCpu, _) => {
                return Err(RegistryError::BadPath {
                    name: self.name,
                    reason: "per-cpu path needs exactly one {cpu} placeholder".into(),
                })
            }
            (Scope::Host, _) => {
                return Err(RegistryError::BadPath {
                    name: self.name,
                    reason: "host-wide path must not contain {cpu}".into(),
                })
            }
        }
        let spec = KnobSpec {
            name: self.name,
            subsystem: self.subsystem,
            kind,
            scope: self.scope,
            path: self.path,
            default: self.default,
            description: self.description,
            hints: self.hints,
        };
        if spec.ordinal(&spec.default).is_none() {
            return Err(RegistryError::DefaultOutOfDomain {
                name: spec.name.clone(),
                value: spec.default.to_string(),
            });
        }
        Ok(spec)
    }

    fn from_spec(spec: &KnobSpec) -> Self {
        let (min, max, step, units, values) = match &spec.kind {
            KnobKind::Int { min, max, step, units } => {
                (Some(*min), Some(*max), Some(*step), Some(units.clone()), None)
            }
            KnobKind::Enum { values } => (None, None, None, None, Some(values.clone())),
            KnobKind::Bool => (None, None, None, None, None),
        };
        Self {
            name: spec.name.clone(),
            subsystem: spec.subsystem,
            kind: spec.kind.label().to_string(),
            min,
            max,
            step,
            units,
            values,
            scope: spec.scope,
            path: spec.path.clone(),
            default: spec.default.clone(),
            description: spec.description.clone(),
            hints: spec.hints.clone(),
        }
    }
}

/// Immutable catalog of knobs, dependency rules, and named knob lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    knobs: Vec<KnobSpec>,
    index: HashMap<String, usize>,
    rules: Vec<DependencyRule>,
    sets: BTreeMap<String, Vec<String>>,
}

impl Registry {
    pub fn load(document: &str) -> Result<Self, RegistryError> {
        let file: CatalogFile =
            toml::from_str(document).map_err(|e| RegistryError::Parse(e.message().to_string()))?;
        if file.knob.is_empty() {
            return Err(RegistryError::Empty);
        }
        let mut knobs = Vec::with_capacity(file.knob.len());
        let mut index = HashMap::new();
        for record in file.knob {
            let spec = record.into_spec()?;
            if index.insert(spec.name.clone(), knobs.len()).is_some() {
                return Err(RegistryError::Duplicate(spec.name));
            }
            knobs.push(spec);
        }
        let mut rule_ids = HashSet::new();
        for rule in &file.rule {
            if !rule_ids.insert(rule.id.as_str()) {
                return Err(RegistryError::DuplicateRule(rule.id.clone()));
            }
            for member in &rule.members {
                if !index.contains_key(member) {
                    return Err(RegistryError::DanglingMember {
                        rule: rule.id.clone(),
                        member: member.clone(),
                    });
                }
            }
            if rule.kind == RuleKind::Ordering {
                let ok = rule.members.len() == 2
                    && rule.members[0] != rule.members[1]
                    && rule
                        .members
                        .iter()
                        .all(|m| matches!(knobs[index[m]].kind, KnobKind::Int { .. }));
                if !ok {
                    return Err(RegistryError::BadOrderingRule(rule.id.clone()));
                }
            }
        }
        for knob in &knobs {
            for hint in &knob.hints {
                if !rule_ids.contains(hint.as_str()) {
                    return Err(RegistryError::DanglingHint {
                        knob: knob.name.clone(),
                        rule: hint.clone(),
                    });
                }
            }
        }
        for (set, names) in &file.sets {
            for name in names {
                if !index.contains_key(name) {
                    return Err(RegistryError::DanglingMember {
                        rule: format!("set {set}"),
                        member: name.clone(),
                    });
                }
            }
        }
        Ok(Self { knobs, index, rules: file.rule, sets: file.sets })
    }

    pub fn builtin() -> Self {
        Self::load(BUILTIN_CATALOG).expect("shipped catalog is valid")
    }

    pub fn to_document(&self) -> String {
        let file = CatalogFile {
            sets: self.sets.clone(),
            knob: self.knobs.iter().map(KnobRecord::from_spec).collect(),
            rule: self.rules.clone(),
        };
        toml::to_string(&file).expect("catalog serializes")
    }

    pub fn len(&self) -> usize {
        self.knobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knobs.is_empty()
    }

    pub fn knobs(&self) -> &[KnobSpec] {
        &self.knobs
    }

    pub fn get(&self, name: &str) -> Option<&KnobSpec> {
        self.index.get(name).map(|&i| &self.knobs[i])
    }

    pub fn rules(&self) -> &[DependencyRule] {
        &self.rules
    }

    pub fn named_set(&self, set: &str) -> Option<&[String]> {
        self.sets.get(set).map(Vec::as_slice)
    }

    pub fn set_names(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    pub fn resolve_tunable_set<S: AsRef<str>>(&self, names: &[S]) -> Result<KnobSet, RegistryError> {
        self.resolve_named("custom", names)
    }

    /// Resolves either a named set from the catalog's `[sets]` table or, failing
    /// that, a comma-separated list of knob names.
    pub fn resolve_set_spec(&self, spec: &str) -> Result<KnobSet, RegistryError> {
        if let Some(names) = self.sets.get(spec) {
            return self.resolve_named(spec, names);
        }
        let names: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if names.len() == 1 && self.get(names[0]).is_none() {
            return Err(RegistryError::UnknownSet(spec.to_string()));
        }
        self.resolve_named("custom", &names)
    }

    fn resolve_named<S: AsRef<str>>(&self, set: &str, names: &[S]) -> Result<KnobSet, RegistryError> {
        if names.is_empty() {
            return Err(RegistryError::EmptySet);
        }
        let mut seen = HashSet::new();
        let mut members = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            let spec = self.get(name).ok_or_else(|| RegistryError::UnknownKnob(name.to_string()))?;
            if !seen.insert(name) {
                return Err(RegistryError::DuplicateMember(name.to_string()));
            }
            members.push(spec.clone());
        }
        let rules = self
            .rules
            .iter()
            .filter(|r| match r.kind {
                RuleKind::Ordering => r.members.iter().all(|m| seen.contains(m.as_str())),
                RuleKind::Advisory => r.members.iter().any(|m| seen.contains(m.as_str())),
            })
            .cloned()
            .collect();
        let active = members.iter().map(KnobSpec::declared_range).collect();
        Ok(KnobSet { name: set.to_string(), members, active, rules })
    }
}

/// An ordered, duplicate-free selection of knobs with their active ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct KnobSet {
    pub name: String,
    members: Vec<KnobSpec>,
    active: Vec<ValueRange>,
    rules: Vec<DependencyRule>,
}

impl KnobSet {
    pub fn members(&self) -> &[KnobSpec] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|k| k.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.members.iter().position(|k| k.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&KnobSpec> {
        self.position(name).map(|i| &self.members[i])
    }

    pub fn active_range(&self, name: &str) -> Option<ValueRange> {
        self.position(name).map(|i| self.active[i])
    }

    pub fn active_ranges(&self) -> impl Iterator<Item = (&KnobSpec, ValueRange)> {
        self.members.iter().zip(self.active.iter().copied())
    }

    /// Rules relevant to this set: ordering rules with both members present,
    /// advisory rules with at least one.
    pub fn rules(&self) -> &[DependencyRule] {
        &self.rules
    }

    /// Whether `assignments` satisfy every hard ordering rule of the set.
    pub fn satisfies_ordering(&self, assignments: &BTreeMap<String, KnobValue>) -> bool {
        self.rules.iter().filter(|r| r.kind == RuleKind::Ordering).all(|r| {
            match (assignments.get(&r.members[0]), assignments.get(&r.members[1])) {
                (Some(KnobValue::Int(a)), Some(KnobValue::Int(b))) => a <= b,
                _ => true,
            }
        })
    }

    /// Narrows the active range of one knob. The new range must lie within
    /// the declared domain (it may be wider than the current active range,
    /// which is how trim revisions widen an earlier narrowing).
    pub fn set_active_range(&mut self, name: &str, range: ValueRange) -> Result<(), RegistryError> {
        let i = self.position(name).ok_or_else(|| RegistryError::UnknownKnob(name.to_string()))?;
        if !range.is_within(&self.members[i].declared_range()) {
            return Err(RegistryError::RangeOutsideDomain { name: name.to_string(), lo: range.lo, hi: range.hi });
        }
        self.active[i] = range;
        Ok(())
    }

    /// Whether `value` is legal for `name` under the active range.
    pub fn in_active_range(&self, name: &str, value: &KnobValue) -> bool {
        match (self.get(name), self.active_range(name)) {
            (Some(spec), Some(range)) => spec.ordinal(value).is_some_and(|o| range.contains(o)),
            _ => false,
        }
    }

    pub fn default_configuration(&self) -> Result<Configuration, RegistryError> {
        let mut assignments = BTreeMap::new();
        for (spec, range) in self.active_ranges() {
            let ordinal = spec.ordinal(&spec.default).expect("catalog defaults are validated");
            if !range.contains(ordinal) {
                return Err(RegistryError::DefaultOutsideActiveRange { name: spec.name.clone() });
            }
            assignments.insert(spec.name.clone(), spec.default.clone());
        }
        Ok(Configuration { assignments, commit_id: 0, timestamp: 0.0 })
    }

    /// Deterministic schema block for prompts: one line per member in set
    /// order, followed by the relevant dependency hints.
    pub fn describe_for_prompt(&self) -> String {
        let mut out = String::new();
        for (spec, range) in self.active_ranges() {
            let scope = match spec.scope {
                Scope::Host => "host",
                Scope::PerCpu => "per-cpu",
            };
            let narrowed = if range != spec.declared_range() { " (narrowed)" } else { "" };
            out.push_str(&format!(
                "- {} [{:?}/{}/{}] domain {}{}; default {}. {}\n",
                spec.name,
                spec.subsystem,
                spec.kind.label(),
                scope,
                spec.domain_text(&range),
                narrowed,
                spec.default,
                spec.description
            ));
        }
        if !self.rules.is_empty() {
            out.push_str("Dependencies:\n");
            for rule in &self.rules {
                let tag = match rule.kind {
                    RuleKind::Ordering => format!("hard: {} <= {}", rule.members[0], rule.members[1]),
                    RuleKind::Advisory => format!("hint: {}", rule.members.join(", ")),
                };
                out.push_str(&format!("- {} ({}): {}\n", rule.id, tag, rule.description));
            }
        }
        out
    }
}

/// A committed assignment of values to every member of a knob set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub assignments: BTreeMap<String, KnobValue>,
    pub commit_id: u64,
    /// Seconds on the session clock.
    pub timestamp: f64,
}

impl Configuration {
    pub fn get(&self, name: &str) -> Option<&KnobValue> {
        self.assignments.get(name)
    }

    /// Same assignments, ignoring commit metadata.
    pub fn same_values(&self, other: &Configuration) -> bool {
        self.assignments == other.assignments
    }

    /// Compact `name=value` rendering in set order.
    pub fn render(&self, set: &KnobSet) -> String {
        set.names()
            .filter_map(|n| self.assignments.get(n).map(|v| format!("{n}={v}")))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Checks that assignments cover exactly the set and respect active ranges.
    pub fn conforms_to(&self, set: &KnobSet) -> bool {
        self.assignments.len() == set.len()
            && set.names().all(|n| self.assignments.get(n).is_some_and(|v| set.in_active_range(n, v)))
    }
}
