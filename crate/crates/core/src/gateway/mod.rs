//! Model gateway: sends prompts to pluggable backends and turns replies into
//! typed tuner responses.

mod http;
mod policy;
mod scripted;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ResponseSchema;
use crate::registry::KnobValue;

pub use http::HttpBackend;
pub use policy::{PolicyConfig, PolicyEngine, ReasoningStyle, TrimPolicy};
pub use scripted::{ScriptRecord, ScriptRole, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("timed out after {0} s")]
    Timeout(f64),
    #[error("configuration: {0}")]
    Config(String),
    #[error("script exhausted for role {0}")]
    Exhausted(Role),
}

impl GatewayError {
    /// Only transport-level failures are worth one retry.
    fn retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::Timeout(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Instant,
    Reasoning,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Instant => "instant",
            Role::Reasoning => "reasoning",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    /// Currency units per input token.
    pub input: f64,
    pub output: f64,
}

fn default_temperature() -> f64 {
    0.7
}

fn default_role() -> Role {
    Role::Instant
}

fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Filled from the config slot when omitted.
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub price: Option<Price>,
}

impl ModelEndpoint {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.timeout_s <= 0.0 {
            return Err(GatewayError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Rough token estimate for backends that do not report usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Range narrowing and freezing requested by a trim reply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrimDirective {
    #[serde(default)]
    pub narrow: BTreeMap<String, (KnobValue, KnobValue)>,
    #[serde(default)]
    pub freeze: BTreeMap<String, KnobValue>,
}

impl TrimDirective {
    pub fn is_empty(&self) -> bool {
        self.narrow.is_empty() && self.freeze.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TunerResponse {
    pub updates: BTreeMap<String, KnobValue>,
    pub justification: String,
    pub converged: bool,
    /// Recorded only; never executed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimDirective>,
    pub usage: Usage,
    pub latency_s: f64,
    #[serde(default)]
    pub errored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub raw: String,
}

impl TunerResponse {
    pub fn errored(error: impl Into<String>, raw: &str) -> Self {
        Self { errored: true, error: Some(error.into()), raw: raw.to_string(), ..Self::default() }
    }
}

fn knob_value(v: &serde_json::Value) -> Option<KnobValue> {
    match v {
        serde_json::Value::Bool(b) => Some(KnobValue::Bool(*b)),
        serde_json::Value::Number(n) => n.as_i64().or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)).map(KnobValue::Int),
        serde_json::Value::String(s) => {
            let t = s.trim();
            Some(t.parse::<i64>().map(KnobValue::Int).unwrap_or_else(|_| KnobValue::Token(t.to_string())))
        }
        _ => None,
    }
}

/// The outermost `{...}` of a reply, ignoring code fences and chatter.
fn json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (start < end).then(|| &text[start..=end])
}

fn parse_trim(v: &serde_json::Value, schema: &ResponseSchema, commands: &mut Vec<String>) -> TrimDirective {
    let mut out = TrimDirective::default();
    if let Some(narrow) = v.get("narrow").and_then(|n| n.as_object()) {
        for (k, r) in narrow {
            let pair = r.as_array().filter(|a| a.len() == 2).and_then(|a| Some((knob_value(&a[0])?, knob_value(&a[1])?)));
            match pair {
                Some(p) if schema.permits(k) => {
                    out.narrow.insert(k.clone(), p);
                }
                _ => commands.push(format!("dropped trim.narrow {k}={r}")),
            }
        }
    }
    if let Some(freeze) = v.get("freeze").and_then(|n| n.as_object()) {
        for (k, r) in freeze {
            match knob_value(r) {
                Some(val) if schema.permits(k) => {
                    out.freeze.insert(k.clone(), val);
                }
                _ => commands.push(format!("dropped trim.freeze {k}={r}")),
            }
        }
    }
    out
}

/// Parses a model reply. Never fails: malformed replies come back as errored
/// no-op responses carrying the raw text.
pub fn parse_structured(reply: &str, schema: &ResponseSchema) -> TunerResponse {
    let Some(body) = json_object(reply) else {
        return TunerResponse::errored("reply contains no JSON object", reply);
    };
    let obj = match serde_json::from_str::<serde_json::Value>(body) {
        Ok(serde_json::Value::Object(m)) => m,
        Ok(_) => return TunerResponse::errored("reply is not an object", reply),
        Err(e) => return TunerResponse::errored(format!("malformed reply: {e}"), reply),
    };
    let mut resp = TunerResponse { raw: reply.to_string(), ..TunerResponse::default() };
    for (key, value) in &obj {
        match key.as_str() {
            "updates" => match value.as_object() {
                Some(updates) => {
                    for (k, v) in updates {
                        match knob_value(v) {
                            Some(val) if schema.permits(k) => {
                                resp.updates.insert(k.clone(), val);
                            }
                            _ => resp.commands.push(format!("dropped update {k}={v}")),
                        }
                    }
                }
                None => resp.commands.push(format!("dropped updates={value}")),
            },
            "justification" => resp.justification = value.as_str().map_or_else(|| value.to_string(), str::to_string),
            "converged" => resp.converged = value.as_bool().unwrap_or(false),
            "commands" => match value.as_array() {
                Some(items) => resp
                    .commands
                    .extend(items.iter().map(|c| c.as_str().map_or_else(|| c.to_string(), str::to_string))),
                None => resp.commands.push(value.to_string()),
            },
            "trim" => resp.trim = Some(parse_trim(value, schema, &mut resp.commands)),
            // flat replies put knobs at the top level
            k if schema.permits(k) => match knob_value(value) {
                Some(val) => {
                    resp.updates.insert(k.to_string(), val);
                }
                None => resp.commands.push(format!("dropped update {k}={value}")),
            },
            other => resp.commands.push(format!("{other}: {value}")),
        }
    }
    resp
}

/// One completed backend call.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    /// Latency claimed by the backend (scripted backends simulate it).
    pub latency_s: Option<f64>,
}

pub trait ModelBackend: Send {
    fn complete(&mut self, role: Role, prompt: &str, schema: &ResponseSchema) -> Result<Completion, GatewayError>;

    /// True when identical prompt sequences always yield identical replies.
    fn deterministic(&self) -> bool;

    fn kind(&self) -> &'static str;
}

/// Always replies with an empty proposal.
#[derive(Debug, Default, Clone)]
pub struct NoopBackend;

impl ModelBackend for NoopBackend {
    fn complete(&mut self, _role: Role, _prompt: &str, _schema: &ResponseSchema) -> Result<Completion, GatewayError> {
        Ok(Completion {
            text: r#"{"updates": {}, "justification": "no-op backend", "converged": false}"#.into(),
            usage: Some(Usage::default()),
            latency_s: Some(0.0),
        })
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn kind(&self) -> &'static str {
        "noop"
    }
}

pub type SharedBackend = Arc<Mutex<dyn ModelBackend>>;

pub fn shared(backend: impl ModelBackend + 'static) -> SharedBackend {
    Arc::new(Mutex::new(backend))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub role: Role,
    pub usage: Usage,
    pub latency_s: f64,
    pub errored: bool,
}

/// Per-role backends plus the usage log. Cloning shares both.
#[derive(Clone)]
pub struct Gateway {
    backends: BTreeMap<Role, SharedBackend>,
    log: Arc<Mutex<Vec<UsageRecord>>>,
}

impl Gateway {
    pub fn new() -> Self {
        Self { backends: BTreeMap::new(), log: Arc::new(Mutex::new(Vec::new())) }
    }

    pub fn with_backend(mut self, role: Role, backend: SharedBackend) -> Self {
        self.backends.insert(role, backend);
        self
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.backends.contains_key(&role)
    }

    /// True when every configured backend is deterministic.
    pub fn deterministic(&self) -> bool {
        self.backends.values().all(|b| b.lock().unwrap_or_else(|e| e.into_inner()).deterministic())
    }

    pub fn backend_kinds(&self) -> BTreeMap<Role, &'static str> {
        self.backends.iter().map(|(r, b)| (*r, b.lock().unwrap_or_else(|e| e.into_inner()).kind())).collect()
    }

    /// Sends one prompt; transport failures are retried once, then surface
    /// as an errored no-op response.
    pub fn request(&self, role: Role, prompt: &str, schema: &ResponseSchema) -> TunerResponse {
        let Some(backend) = self.backends.get(&role) else {
            return self.record(role, TunerResponse::errored(format!("no backend for role {role}"), ""));
        };
        let started = Instant::now();
        let mut backend = backend.lock().unwrap_or_else(|e| e.into_inner());
        let mut result = backend.complete(role, prompt, schema);
        if result.as_ref().is_err_and(GatewayError::retryable) {
            result = backend.complete(role, prompt, schema);
        }
        drop(backend);
        let resp = match result {
            Ok(c) => {
                let mut r = parse_structured(&c.text, schema);
                r.usage = c.usage.unwrap_or(Usage {
                    input_tokens: estimate_tokens(prompt),
                    output_tokens: estimate_tokens(&c.text),
                });
                r.latency_s = c.latency_s.unwrap_or_else(|| started.elapsed().as_secs_f64());
                r
            }
            Err(e) => TunerResponse::errored(e.to_string(), ""),
        };
        self.record(role, resp)
    }

    fn record(&self, role: Role, resp: TunerResponse) -> TunerResponse {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(UsageRecord {
            role,
            usage: resp.usage,
            latency_s: resp.latency_s,
            errored: resp.errored,
        });
        resp
    }

    pub fn usage_log(&self) -> Vec<UsageRecord> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub requests: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Present only when every role in the log has a price.
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub total: UsageTotals,
    pub per_role: BTreeMap<Role, UsageTotals>,
}

pub fn account_usage(log: &[UsageRecord], prices: &BTreeMap<Role, Price>) -> UsageReport {
    let mut report = UsageReport::default();
    for r in log {
        let t = report.per_role.entry(r.role).or_insert(UsageTotals { cost: Some(0.0), ..UsageTotals::default() });
        t.requests += 1;
        t.input_tokens += r.usage.input_tokens;
        t.output_tokens += r.usage.output_tokens;
        t.cost = match (t.cost, prices.get(&r.role)) {
            (Some(c), Some(p)) => {
                Some(c + r.usage.input_tokens as f64 * p.input + r.usage.output_tokens as f64 * p.output)
            }
            _ => None,
        };
    }
    let mut total = UsageTotals { cost: Some(0.0), ..UsageTotals::default() };
    for t in report.per_role.values() {
        total.requests += t.requests;
        total.input_tokens += t.input_tokens;
        total.output_tokens += t.output_tokens;
        total.cost = total.cost.zip(t.cost).map(|(a, b)| a + b);
    }
    report.total = total;
    report
}
