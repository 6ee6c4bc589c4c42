//! Entropy-based confidence for breaking ties among top-scored candidates.
//!
//! Each tied candidate is asked a True/False match question; the entropy of
//! the last-token distribution measures how unsure the model is. The
//! candidate with the lowest entropy wins.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{ContentError, MultimodalContent, PartBuilder};
use crate::finescorer::{ScorePrompt, TokenLogprob};

pub const CONFIDENCE_INSTRUCTION: &str = "Does the candidate match the query, True or False.";

/// Alternatives requested for the final token.
pub const DEFAULT_TOP_LOGPROBS: u32 = 20;

const RENORMALIZED_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TieBreakError {
    #[error("top-logprob list is empty")]
    EmptyList,
    #[error("logprob for token {token:?} is positive or NaN: {logprob}")]
    PositiveLogprob { token: String, logprob: f64 },
    #[error("distribution has not been renormalized")]
    NotRenormalized,
    #[error("probability for token {0:?} is not positive")]
    NonPositiveProbability(String),
    #[error("tie set is empty")]
    EmptyTieSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub probs: Vec<(String, f64)>,
    /// Mass covered by the listed tokens before renormalization.
    pub coverage: f64,
    pub renormalized: bool,
}

impl TokenDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyScore {
    pub candidate_id: String,
    /// Nats.
    pub h_raw: f64,
    /// `h_raw / ln(V)` for the V tokens seen; 0 when V = 1.
    pub h_normalized: f64,
}

impl EntropyScore {
    pub fn from_distribution(candidate_id: impl Into<String>, dist: &TokenDistribution) -> Result<Self, TieBreakError> {
        let h_raw = entropy(dist)?;
        let v = dist.len();
        let h_normalized = if v <= 1 {
            0.0
        } else {
            (h_raw / (v as f64).ln()).clamp(0.0, 1.0)
        };
        Ok(Self {
            candidate_id: candidate_id.into(),
            h_raw,
            h_normalized,
        })
    }
}

/// Shannon entropy in nats.
pub fn entropy(dist: &TokenDistribution) -> Result<f64, TieBreakError> {
    if !dist.renormalized {
        return Err(TieBreakError::NotRenormalized);
    }
    let total: f64 = dist.probs.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > RENORMALIZED_TOLERANCE {
        return Err(TieBreakError::NotRenormalized);
    }
    let mut h = 0.0;
    for (token, p) in &dist.probs {
        if p.is_nan() || *p <= 0.0 {
            return Err(TieBreakError::NonPositiveProbability(token.clone()));
        }
        h -= p * p.ln();
    }
    Ok(h.max(0.0))
}

/// The True/False confidence prompt: `<query>, <candidate>. <instruction>`.
pub fn build_confidence_prompt(
    query: &MultimodalContent,
    candidate: &MultimodalContent,
) -> Result<ScorePrompt, ContentError> {
    let mut b = PartBuilder::default();
    b.push_content(query);
    b.push_text(", ");
    b.push_content(candidate);
    b.push_text(". ");
    b.push_text(CONFIDENCE_INSTRUCTION);
    let mut prompt = ScorePrompt::user(b.finish()?, 1);
    prompt.top_logprobs = Some(DEFAULT_TOP_LOGPROBS);
    Ok(prompt)
}

/// Exponentiates and renormalizes a truncated top-K list. Repeated token
/// strings are merged by summing their probability.
pub fn distribution_from_top_logprobs(top: &[TokenLogprob]) -> Result<TokenDistribution, TieBreakError> {
    if top.is_empty() {
        return Err(TieBreakError::EmptyList);
    }
    let mut probs: Vec<(String, f64)> = Vec::with_capacity(top.len());
    for t in top {
        if t.logprob.is_nan() || t.logprob > 0.0 {
            return Err(TieBreakError::PositiveLogprob {
                token: t.token.clone(),
                logprob: t.logprob,
            });
        }
        let p = t.logprob.exp();
        match probs.iter_mut().find(|(tok, _)| *tok == t.token) {
            Some((_, acc)) => *acc += p,
            None => probs.push((t.token.clone(), p)),
        }
    }
    let coverage: f64 = probs.iter().map(|(_, p)| p).sum();
    if coverage.is_nan() || coverage <= 0.0 {
        // Every listed logprob underflowed.
        return Err(TieBreakError::NonPositiveProbability(top[0].token.clone()));
    }
    for (_, p) in probs.iter_mut() {
        *p /= coverage;
    }
    Ok(TokenDistribution {
        probs,
        coverage,
        renormalized: true,
    })
}

/// Lowest `h_raw` wins; exact entropy ties go to the smallest id.
pub fn break_ties(tied: &[EntropyScore]) -> Result<&str, TieBreakError> {
    tied.iter()
        .min_by(|a, b| {
            a.h_raw
                .total_cmp(&b.h_raw)
                .then_with(|| a.candidate_id.cmp(&b.candidate_id))
        })
        .map(|e| e.candidate_id.as_str())
        .ok_or(TieBreakError::EmptyTieSet)
}
