//! Generative fine-stage scoring: build a prompt for a (query, candidate)
//! pair, ask a backend for a similarity score, parse the reply.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{ContentError, MultimodalContent, Part, PartBuilder};
use crate::util::Stopwatch;

pub const QUERY_PLACEHOLDER: &str = "{query}";
pub const CANDIDATE_PLACEHOLDER: &str = "{candidate}";

/// Default scoring instruction. Asks for a bare integer in `[0, 100]`.
pub const DEFAULT_SCORE_TEMPLATE: &str = include_str!("../templates/score.txt");

/// Appended to the user message when the first reply had no number in it.
pub const REASK_INSTRUCTION: &str =
    "\nYour previous answer contained no number. Respond with only a single integer from 0 to 100.";

pub const MAX_SCORE: u8 = 100;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("no score found in reply {0:?}")]
    NoScoreFound(String),
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend has no entry for pair ({query_id}, {candidate_id})")]
    UnknownPair { query_id: String, candidate_id: String },
    #[error("malformed backend reply: {0}")]
    InvalidReply(String),
    #[error("cannot build backend request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: MultimodalContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePrompt {
    pub messages: Vec<Message>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    /// Number of last-token alternatives to request, if any.
    pub top_logprobs: Option<u32>,
}

impl ScorePrompt {
    pub fn user(content: MultimodalContent, max_output_tokens: u32) -> Self {
        Self {
            messages: vec![Message {
                role: Role::User,
                content,
            }],
            max_output_tokens,
            temperature: 0.0,
            top_logprobs: None,
        }
    }

    /// Copy of the prompt with `text` appended to the last message.
    pub fn with_appended_text(&self, text: &str) -> Self {
        let mut out = self.clone();
        if let Some(last) = out.messages.last_mut() {
            let mut b = PartBuilder::default();
            b.push_content(&last.content);
            b.push_text(text);
            last.content = b.finish().expect("non-empty");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendReply {
    pub text: String,
    pub last_token_top_logprobs: Option<Vec<TokenLogprob>>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            last_token_top_logprobs: None,
        }
    }

    /// Checks the top-logprobs invariants: non-empty, `<= 0`, descending.
    pub fn validate(&self) -> Result<(), BackendError> {
        let Some(top) = &self.last_token_top_logprobs else {
            return Ok(());
        };
        if top.is_empty() {
            return Err(BackendError::InvalidReply("empty top_logprobs".into()));
        }
        if top.iter().any(|t| t.logprob.is_nan() || t.logprob > 0.0) {
            return Err(BackendError::InvalidReply("logprob > 0 or NaN".into()));
        }
        if top.windows(2).any(|w| w[0].logprob < w[1].logprob) {
            return Err(BackendError::InvalidReply("top_logprobs not sorted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Score,
    Confidence,
}

/// A prompt plus the identities of the pair it was built from. Real model
/// backends only look at the prompt; test doubles may key on the ids.
#[derive(Debug, Clone, Copy)]
pub struct BackendRequest<'a> {
    pub query_id: &'a str,
    pub candidate_id: &'a str,
    pub kind: RequestKind,
    pub prompt: &'a ScorePrompt,
}

pub trait ScoringBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError>;
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub template: String,
    pub max_output_tokens: u32,
    /// Extra attempts after an `Unavailable` error.
    pub max_retries: u32,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            template: DEFAULT_SCORE_TEMPLATE.to_owned(),
            max_output_tokens: 8,
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineScore {
    pub candidate_id: String,
    pub score: u8,
    pub raw_text: String,
    pub backend_latency_ms: f64,
    /// Both the first reply and the re-ask contained no number.
    pub parse_failed: bool,
    /// Backend requests issued, including retries.
    pub backend_calls: u32,
}

/// Substitutes `{query}` and `{candidate}` into `template`. Image parts
/// stay image parts; neighbouring text is merged.
pub fn build_score_prompt(
    query: &MultimodalContent,
    candidate: &MultimodalContent,
    template: &str,
) -> Result<ScorePrompt, ScoreError> {
    if !template.contains(QUERY_PLACEHOLDER) {
        return Err(ScoreError::MissingPlaceholder(QUERY_PLACEHOLDER));
    }
    if !template.contains(CANDIDATE_PLACEHOLDER) {
        return Err(ScoreError::MissingPlaceholder(CANDIDATE_PLACEHOLDER));
    }
    let mut b = PartBuilder::default();
    let mut rest = template;
    loop {
        let q = rest.find(QUERY_PLACEHOLDER);
        let c = rest.find(CANDIDATE_PLACEHOLDER);
        let (pos, len, content) = match (q, c) {
            (Some(q), Some(c)) if q < c => (q, QUERY_PLACEHOLDER.len(), query),
            (Some(_), Some(c)) => (c, CANDIDATE_PLACEHOLDER.len(), candidate),
            (Some(q), None) => (q, QUERY_PLACEHOLDER.len(), query),
            (None, Some(c)) => (c, CANDIDATE_PLACEHOLDER.len(), candidate),
            (None, None) => break,
        };
        b.push_text(&rest[..pos]);
        b.push_content(content);
        rest = &rest[pos + len..];
    }
    b.push_text(rest);
    Ok(ScorePrompt::user(
        b.finish()?,
        ScorerConfig::default().max_output_tokens,
    ))
}

/// First maximal run of ASCII digits, clamped to `[0, 100]`.
pub fn parse_score(text: &str) -> Result<u8, ScoreError> {
    let start = text
        .find(|c: char| c.is_ascii_digit())
        .ok_or_else(|| ScoreError::NoScoreFound(text.to_owned()))?;
    let run = &text[start..];
    let end = run.find(|c: char| !c.is_ascii_digit()).unwrap_or(run.len());
    let digits = run[..end].trim_start_matches('0');
    // Anything longer than three significant digits is above the clamp anyway.
    let value = if digits.len() > 3 {
        u32::from(MAX_SCORE)
    } else {
        digits.parse::<u32>().unwrap_or(0)
    };
    Ok(value.min(u32::from(MAX_SCORE)) as u8)
}

fn complete_with_retry(
    backend: &dyn ScoringBackend,
    request: &BackendRequest<'_>,
    max_retries: u32,
    calls: &mut u32,
) -> Result<BackendReply, BackendError> {
    let mut attempt = 0;
    loop {
        *calls += 1;
        match backend.complete(request) {
            Ok(reply) => {
                reply.validate()?;
                return Ok(reply);
            }
            Err(BackendError::Unavailable(msg)) if attempt < max_retries => {
                tracing::warn!(backend = backend.name(), attempt, "retrying after: {msg}");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Completes `request`, retrying transport failures up to `max_retries` times.
pub fn complete_request(
    backend: &dyn ScoringBackend,
    request: &BackendRequest<'_>,
    max_retries: u32,
) -> (Result<BackendReply, BackendError>, u32) {
    let mut calls = 0;
    let r = complete_with_retry(backend, request, max_retries, &mut calls);
    (r, calls)
}

/// Scores one pair. A reply without a number is re-asked once; if that
/// also fails the score is 0 and `parse_failed` is set.
pub fn score_pair(
    backend: &dyn ScoringBackend,
    query_id: &str,
    query: &MultimodalContent,
    candidate_id: &str,
    candidate: &MultimodalContent,
    config: &ScorerConfig,
) -> Result<FineScore, ScoreError> {
    let mut prompt = build_score_prompt(query, candidate, &config.template)?;
    prompt.max_output_tokens = config.max_output_tokens;
    let clock = Stopwatch::start();
    let mut calls = 0;
    let mut request = BackendRequest {
        query_id,
        candidate_id,
        kind: RequestKind::Score,
        prompt: &prompt,
    };
    let first = complete_with_retry(backend, &request, config.max_retries, &mut calls)?;
    let (score, raw_text, parse_failed) = match parse_score(&first.text) {
        Ok(s) => (s, first.text, false),
        Err(_) => {
            let reask = prompt.with_appended_text(REASK_INSTRUCTION);
            request.prompt = &reask;
            let second = complete_with_retry(backend, &request, config.max_retries, &mut calls)?;
            match parse_score(&second.text) {
                Ok(s) => (s, second.text, false),
                Err(_) => {
                    tracing::warn!(query_id, candidate_id, "no score after re-ask");
                    (0, second.text, true)
                }
            }
        }
    };
    Ok(FineScore {
        candidate_id: candidate_id.to_owned(),
        score,
        raw_text,
        backend_latency_ms: clock.elapsed_ms(),
        parse_failed,
        backend_calls: calls,
    })
}

/// Prompt parts in order, flattening text for quick inspection.
pub fn prompt_text(prompt: &ScorePrompt) -> String {
    prompt
        .messages
        .iter()
        .flat_map(|m| m.content.parts())
        .map(|p| match p {
            Part::Text(t) => t.clone(),
            Part::ImageRef(r) => format!("<image:{r}>"),
        })
        .collect()
}
