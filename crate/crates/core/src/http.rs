//! Chat-completions HTTP backend. The transport needs the `http` feature;
//! request and response mapping is always available.
//!
//! Sends one pair per request with `logprobs: true` and reads the message
//! text plus the top alternatives at the last generated token.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::content::Part;
use crate::finescorer::{BackendError, BackendReply, Role, ScorePrompt, TokenLogprob};
#[cfg(feature = "http")]
use crate::finescorer::{BackendRequest, ScoringBackend};
use crate::tiebreak::DEFAULT_TOP_LOGPROBS;

pub const DEFAULT_API_KEY_ENV: &str = "COARSEFINE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    /// Used when the environment variable named by `api_key_env` is unset.
    pub api_key: Option<String>,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub top_logprobs: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "Qwen/Qwen2.5-VL-7B-Instruct".into(),
            api_key: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 120,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
        }
    }
}

impl HttpConfig {
    pub fn resolved_api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .or_else(|| self.api_key.clone())
    }
}

#[cfg(feature = "http")]
pub struct HttpBackend {
    agent: ureq::Agent,
    config: HttpConfig,
    api_key: Option<String>,
}

#[cfg(feature = "http")]
impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let api_key = config.resolved_api_key();
        Self { agent, config, api_key }
    }
}

fn image_mime(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// URL for an image part: remote URLs and data URIs pass through, local
/// files are inlined as base64 data URIs.
pub fn image_url(reference: &str) -> Result<String, BackendError> {
    if reference.starts_with("http://") || reference.starts_with("https://") || reference.starts_with("data:") {
        return Ok(reference.to_owned());
    }
    let path = Path::new(reference);
    let bytes =
        std::fs::read(path).map_err(|e| BackendError::InvalidRequest(format!("cannot read image {reference}: {e}")))?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", image_mime(path)))
}

pub fn request_body(prompt: &ScorePrompt, model: &str, default_top_logprobs: u32) -> Result<Value, BackendError> {
    let mut messages = Vec::with_capacity(prompt.messages.len());
    for m in &prompt.messages {
        let mut parts = Vec::new();
        for p in m.content.parts() {
            parts.push(match p {
                Part::Text(t) => json!({"type": "text", "text": t}),
                Part::ImageRef(r) => json!({"type": "image_url", "image_url": {"url": image_url(r)?}}),
            });
        }
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
        };
        messages.push(json!({"role": role, "content": parts}));
    }
    Ok(json!({
        "model": model,
        "messages": messages,
        "temperature": prompt.temperature,
        "max_tokens": prompt.max_output_tokens,
        "logprobs": true,
        "top_logprobs": prompt.top_logprobs.unwrap_or(default_top_logprobs),
    }))
}

pub fn parse_response(body: &Value) -> Result<BackendReply, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::InvalidReply("no choices".into()))?;
    let content = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .ok_or_else(|| BackendError::InvalidReply("no message content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect(),
        Value::Null => String::new(),
        other => return Err(BackendError::InvalidReply(format!("content: {other}"))),
    };
    let last_token_top_logprobs = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .and_then(|tokens| tokens.last())
        .and_then(|t| t.get("top_logprobs"))
        .and_then(Value::as_array)
        .map(|top| {
            let mut out: Vec<TokenLogprob> = top
                .iter()
                .filter_map(|e| {
                    let token = e.get("token")?.as_str()?.to_owned();
                    let logprob = e.get("logprob")?.as_f64()?;
                    logprob.is_finite().then_some(TokenLogprob { token, logprob })
                })
                .collect();
            out.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
            out
        })
        .filter(|v| !v.is_empty());
    Ok(BackendReply {
        text,
        last_token_top_logprobs,
    })
}

#[cfg(feature = "http")]
impl ScoringBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        let body = request_body(req.prompt, &self.config.model, self.config.top_logprobs)?;
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if (400..500).contains(&code) && code != 408 && code != 429 => {
                BackendError::InvalidRequest(format!("endpoint returned HTTP {code}"))
            }
            e => BackendError::Unavailable(e.to_string()),
        })?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::InvalidReply(e.to_string()))?;
        parse_response(&value)
    }
}
