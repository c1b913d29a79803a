//! Deterministic backend driven by a line-delimited script.
//!
//! Each non-blank line is one JSON record with a `role` tag (`instant`,
//! `reasoning` or `any`) and one of:
//!
//! * `reply` — the reply text (or a JSON object, serialized) for the next
//!   call of that role; optional `latency_s` and `usage`;
//! * `error` — the next call of that role fails with a transport error;
//! * `policy` — a [`PolicyConfig`] answering every call once the role's
//!   queued replies are used up. `any` shares one engine between roles.
//!
//! Lines starting with `#` are comments.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::policy::{PolicyConfig, PolicyEngine};
use super::{Completion, GatewayError, ModelBackend, Role, Usage};
use crate::context::ResponseSchema;
use crate::registry::Registry;

pub const DEFAULT_INSTANT_LATENCY_S: f64 = 1.0;
pub const DEFAULT_REASONING_LATENCY_S: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptRole {
    Instant,
    Reasoning,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub role: ScriptRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl ScriptRecord {
    pub fn reply(role: ScriptRole, reply: serde_json::Value) -> Self {
        Self { role, reply: Some(reply), error: None, policy: None, latency_s: None, usage: None }
    }

    pub fn policy(role: ScriptRole, policy: PolicyConfig) -> Self {
        Self { role, reply: None, error: None, policy: Some(policy), latency_s: None, usage: None }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

enum Step {
    Reply { text: String, latency_s: Option<f64>, usage: Option<Usage> },
    Fail(String),
}

pub struct ScriptedBackend {
    queues: BTreeMap<Role, VecDeque<Step>>,
    engines: Vec<PolicyEngine>,
    engine_of: BTreeMap<Role, usize>,
    calls: BTreeMap<Role, u64>,
}

fn default_latency(role: Role) -> f64 {
    match role {
        Role::Instant => DEFAULT_INSTANT_LATENCY_S,
        Role::Reasoning => DEFAULT_REASONING_LATENCY_S,
    }
}

impl ScriptedBackend {
    pub fn new(records: Vec<ScriptRecord>, registry: &Registry, seed: u64) -> Result<Self, GatewayError> {
        let mut me = Self { queues: BTreeMap::new(), engines: Vec::new(), engine_of: BTreeMap::new(), calls: BTreeMap::new() };
        for (i, r) in records.into_iter().enumerate() {
            let roles: &[Role] = match r.role {
                ScriptRole::Instant => &[Role::Instant],
                ScriptRole::Reasoning => &[Role::Reasoning],
                ScriptRole::Any => &[Role::Instant, Role::Reasoning],
            };
            match (r.reply, r.error, r.policy) {
                (Some(reply), None, None) => {
                    let text = match reply {
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    };
                    for role in roles {
                        me.queues.entry(*role).or_default().push_back(Step::Reply {
                            text: text.clone(),
                            latency_s: r.latency_s,
                            usage: r.usage,
                        });
                    }
                }
                (None, Some(err), None) => {
                    for role in roles {
                        me.queues.entry(*role).or_default().push_back(Step::Fail(err.clone()));
                    }
                }
                (None, None, Some(policy)) => {
                    let idx = me.engines.len();
                    me.engines.push(PolicyEngine::new(policy, registry, seed.wrapping_add(idx as u64)));
                    for role in roles {
                        me.engine_of.insert(*role, idx);
                    }
                }
                _ => {
                    return Err(GatewayError::Config(format!(
                        "script record {}: exactly one of reply, error, policy is required",
                        i + 1
                    )))
                }
            }
        }
        Ok(me)
    }

    pub fn parse(text: &str, registry: &Registry, seed: u64) -> Result<Self, GatewayError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let r: ScriptRecord = serde_json::from_str(line)
                .map_err(|e| GatewayError::Config(format!("script line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Self::new(records, registry, seed)
    }

    /// A backend answering both roles from one shared policy engine.
    pub fn from_policy(policy: PolicyConfig, registry: &Registry, seed: u64) -> Self {
        Self::new(vec![ScriptRecord::policy(ScriptRole::Any, policy)], registry, seed).expect("policy record is valid")
    }

    pub fn calls(&self, role: Role) -> u64 {
        self.calls.get(&role).copied().unwrap_or(0)
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&mut self, role: Role, prompt: &str, schema: &ResponseSchema) -> Result<Completion, GatewayError> {
        *self.calls.entry(role).or_default() += 1;
        if let Some(step) = self.queues.get_mut(&role).and_then(VecDeque::pop_front) {
            return match step {
                Step::Reply { text, latency_s, usage } => {
                    Ok(Completion { text, usage, latency_s: Some(latency_s.unwrap_or(default_latency(role))) })
                }
                Step::Fail(e) => Err(GatewayError::Transport(e)),
            };
        }
        let Some(&idx) = self.engine_of.get(&role) else {
            return Err(GatewayError::Exhausted(role));
        };
        let text = self.engines[idx].reply(role == Role::Reasoning, prompt, schema);
        Ok(Completion { text, usage: None, latency_s: Some(default_latency(role)) })
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn kind(&self) -> &'static str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{shared, Gateway};
    use crate::registry::KnobValue;

    fn schema() -> ResponseSchema {
        ResponseSchema { fields: vec!["min_perf_pct".into(), "max_perf_pct".into()] }
    }

    #[test]
    fn kth_call_gets_kth_record() {
        let script = r#"
# two instant replies, then a fault pair
{"role": "instant", "reply": {"updates": {"min_perf_pct": 10}, "justification": "a"}}
{"role": "instant", "reply": "{\"updates\": {\"min_perf_pct\": 20}, \"justification\": \"b\"}", "latency_s": 0.2}
{"role": "instant", "error": "timeout"}
{"role": "instant", "error": "timeout"}
{"role": "reasoning", "reply": {"updates": {}, "justification": "strategy"}}
"#;
        let reg = Registry::builtin();
        let backend = ScriptedBackend::parse(script, &reg, 1).unwrap();
        let g = Gateway::new().with_backend(Role::Instant, shared(backend));
        let r1 = g.request(Role::Instant, "p", &schema());
        let r2 = g.request(Role::Instant, "p", &schema());
        assert_eq!(r1.updates["min_perf_pct"], KnobValue::Int(10));
        assert_eq!(r2.updates["min_perf_pct"], KnobValue::Int(20));
        assert_eq!(r2.latency_s, 0.2);
        let r3 = g.request(Role::Instant, "p", &schema());
        assert!(r3.errored);
        // exhausted without a policy
        assert!(g.request(Role::Instant, "p", &schema()).errored);
    }

    #[test]
    fn malformed_records_are_config_errors() {
        let reg = Registry::builtin();
        assert!(ScriptedBackend::parse("{\"role\": \"instant\"}", &reg, 0).is_err());
        assert!(ScriptedBackend::parse("not json", &reg, 0).is_err());
    }
}
