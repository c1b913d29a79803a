//! Chat-completions style HTTP backend.

use std::time::Duration;

use serde_json::json;

use super::{Completion, GatewayError, ModelBackend, ModelEndpoint, Role, Usage};
use crate::context::ResponseSchema;

pub struct HttpBackend {
    endpoint: ModelEndpoint,
    api_key: Option<String>,
    agent: ureq::Agent,
    /// Ask for schema-constrained output; backends that reject the
    /// `response_format` field should turn this off.
    pub structured_output: bool,
}

impl HttpBackend {
    /// Resolves the API key from the environment variable named by the
    /// endpoint.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let api_key = match &endpoint.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { endpoint, api_key, agent, structured_output: true })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn body(&self, prompt: &str, schema: &ResponseSchema) -> serde_json::Value {
        let mut body = json!({
            "model": self.endpoint.model_name,
            "temperature": self.endpoint.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        if self.structured_output {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": {"name": "tuner_response", "schema": schema.json_schema()},
            });
        }
        body
    }
}

/// Pulls the reply text and usage out of a chat-completions response.
pub(crate) fn parse_completion(text: &str) -> Result<(String, Option<Usage>), GatewayError> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| GatewayError::Transport(format!("bad response body: {e}")))?;
    let content = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| GatewayError::Transport("response has no choices[0].message.content".into()))?;
    let usage = v.get("usage").map(|u| Usage {
        input_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
        output_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
    });
    Ok((content.to_string(), usage))
}

impl ModelBackend for HttpBackend {
    fn complete(&mut self, _role: Role, prompt: &str, schema: &ResponseSchema) -> Result<Completion, GatewayError> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url).content_type("application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let started = std::time::Instant::now();
        let mut resp = req.send(self.body(prompt, schema).to_string()).map_err(|e| match e {
            ureq::Error::Timeout(_) => GatewayError::Timeout(self.endpoint.timeout_s),
            other => GatewayError::Transport(other.to_string()),
        })?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Transport(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let (content, usage) = parse_completion(&text)?;
        Ok(Completion { text: content, usage, latency_s: Some(started.elapsed().as_secs_f64()) })
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn kind(&self) -> &'static str {
        "http"
    }
}
