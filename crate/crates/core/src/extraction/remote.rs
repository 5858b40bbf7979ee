use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ExtractionError, ReasoningBackend, StepReply, StepRequest};

const SYSTEM_PROMPT: &str = "You read one excerpt of a colocation SLA and reply with a JSON object \
{\"thought\": string, \"candidates\": [CandidateRule], \"request_snippet\": heading or null, \"done\": bool}. \
A CandidateRule has metric (power_kw, temperature_c or humidity_rh), thresholds \
({\"form\":\"bands\",\"value\":{\"none\":[..],\"l1\":[..],\"l2\":[..]}} with intervals written like \"(30, 35]\" or \"(-inf, 30]\"), \
aggregation_window_s, sla_tier, violation_impact, credit_pct {none,l1,l2}, comment_text and confidence (complete or partial).";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_s: u64,
}

impl RemoteConfig {
    /// `SLA_BACKEND_URL` (required), `SLA_BACKEND_KEY`, `SLA_BACKEND_MODEL`.
    pub fn from_env() -> Option<RemoteConfig> {
        let endpoint = std::env::var("SLA_BACKEND_URL").ok().filter(|s| !s.is_empty())?;
        Some(RemoteConfig {
            endpoint,
            api_key: std::env::var("SLA_BACKEND_KEY").ok().filter(|s| !s.is_empty()),
            model: std::env::var("SLA_BACKEND_MODEL").unwrap_or_else(|_| "default".into()),
            timeout_s: 60,
        })
    }
}

/// Chat-completion client. Expects `choices[0].message.content` to hold a
/// [`StepReply`] as JSON; a bare `StepReply` body is accepted too.
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, ExtractionError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| ExtractionError::BackendUnavailable(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn parse(body: &serde_json::Value) -> Result<StepReply, ExtractionError> {
        let bad = |e: String| ExtractionError::BackendUnavailable(format!("malformed reply: {e}"));
        if let Some(content) = body.pointer("/choices/0/message/content") {
            let text = content.as_str().ok_or_else(|| bad("content is not a string".into()))?;
            return serde_json::from_str(strip_fence(text)).map_err(|e| bad(e.to_string()));
        }
        serde_json::from_value(body.clone()).map_err(|e| bad(e.to_string()))
    }
}

fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

impl ReasoningBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn step(&self, req: &StepRequest) -> Result<StepReply, ExtractionError> {
        let user = serde_json::to_string(req).map_err(|e| ExtractionError::BackendUnavailable(e.to_string()))?;
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user},
            ],
        });
        let mut call = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| ExtractionError::BackendUnavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ExtractionError::BackendUnavailable(format!("HTTP {status}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| ExtractionError::BackendUnavailable(e.to_string()))?;
        Self::parse(&value)
    }
}
