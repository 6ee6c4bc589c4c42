//! Deterministic stand-in scorer driven by oracle embeddings.
//!
//! At zero noise the score for a pair is `round(100 * cosine)`, clamped to
//! `[0, 100]`. Every random draw comes from a ChaCha stream seeded by
//! `(seed, query_id, candidate_id)`, so replies do not depend on call order
//! or concurrency.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedstore::{cosine_similarity, EmbeddingStore};
use crate::finescorer::{BackendError, BackendReply, BackendRequest, RequestKind, ScoringBackend, TokenLogprob};

pub const SCORE_PLACEHOLDER: &str = "{score}";

/// Reply layouts the mock can emit; `parse_score` must recover the score
/// from every one of them.
pub const SHIPPED_REPLY_FORMATS: &[&str] = &[
    "{score}",
    "Score: {score}",
    "{score}/100",
    "Similarity score: {score}\nThe candidate matches most details of the query.",
    "  {score}  ",
];

const CONFIDENCE_TOKENS: [&str; 5] = ["True", "False", " True", "true", "Yes"];
const TAIL_WEIGHTS: [f64; 4] = [0.55, 0.25, 0.12, 0.08];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    /// Std-dev of Gaussian noise added to `100 * cosine`.
    pub noise_sigma: f64,
    /// Probability that a pair's score is replaced by a uniform draw in `[0, 100]`.
    pub error_rate: f64,
    /// Quantize scores to multiples of `100 / levels`.
    pub levels: Option<u32>,
    pub reply_format: String,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_sigma: 0.0,
            error_rate: 0.0,
            levels: None,
            reply_format: SHIPPED_REPLY_FORMATS[0].to_owned(),
        }
    }
}

pub struct MockBackend {
    queries: HashMap<String, Vec<f32>>,
    store: Arc<EmbeddingStore>,
    config: MockConfig,
}

/// Seed for the per-pair stream.
fn pair_seed(seed: u64, query_id: &str, candidate_id: &str, stream: u8) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([stream]);
    h.update((query_id.len() as u64).to_le_bytes());
    h.update(query_id.as_bytes());
    h.update(candidate_id.as_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// Score the mock assigns to a pair with cosine `cos`.
pub fn mock_score(cos: f64, config: &MockConfig, query_id: &str, candidate_id: &str) -> u8 {
    let mut rng = ChaCha8Rng::from_seed(pair_seed(config.seed, query_id, candidate_id, 0));
    let u_err: f64 = rng.random();
    let replacement: f64 = rng.random::<f64>() * 100.0;
    let z: f64 = StandardNormal.sample(&mut rng);

    let mut raw = 100.0 * cos;
    if u_err < config.error_rate {
        raw = replacement;
    }
    raw += config.noise_sigma * z;
    let value = match config.levels {
        Some(levels) if levels > 0 => {
            let step = 100.0 / f64::from(levels);
            (raw / step).round() * step
        }
        _ => raw.round(),
    };
    value.clamp(0.0, 100.0).round() as u8
}

/// Synthetic last-token distribution; sharper for higher cosine.
pub fn mock_top_logprobs(cos: f64, config: &MockConfig, query_id: &str, candidate_id: &str) -> Vec<TokenLogprob> {
    let mut rng = ChaCha8Rng::from_seed(pair_seed(config.seed, query_id, candidate_id, 1));
    let certainty = (cos.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let p_top = 0.5 + 0.49 * certainty;
    let weights: Vec<f64> = TAIL_WEIGHTS
        .iter()
        .map(|w| w * (0.9 + 0.2 * rng.random::<f64>()))
        .collect();
    let total: f64 = weights.iter().sum();
    let (first, second) = if cos >= 0.0 { (0, 1) } else { (1, 0) };
    let mut out = vec![TokenLogprob {
        token: CONFIDENCE_TOKENS[first].to_owned(),
        logprob: p_top.ln(),
    }];
    let tail_tokens = [second, 2, 3, 4];
    for (tok, w) in tail_tokens.iter().zip(&weights) {
        out.push(TokenLogprob {
            token: CONFIDENCE_TOKENS[*tok].to_owned(),
            logprob: ((1.0 - p_top) * w / total).ln(),
        });
    }
    out.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    out
}

impl MockBackend {
    pub fn new(queries: HashMap<String, Vec<f32>>, store: Arc<EmbeddingStore>, config: MockConfig) -> Self {
        Self { queries, store, config }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Oracle cosine for a pair.
    pub fn cosine(&self, query_id: &str, candidate_id: &str) -> Result<f64, BackendError> {
        let unknown = || BackendError::UnknownPair {
            query_id: query_id.to_owned(),
            candidate_id: candidate_id.to_owned(),
        };
        let q = self.queries.get(query_id).ok_or_else(unknown)?;
        let c = self.store.get(candidate_id).ok_or_else(unknown)?;
        cosine_similarity(q, c).map_err(|e| BackendError::InvalidReply(e.to_string()))
    }
}

impl ScoringBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        let cos = self.cosine(req.query_id, req.candidate_id)?;
        let top = mock_top_logprobs(cos, &self.config, req.query_id, req.candidate_id);
        let text = match req.kind {
            RequestKind::Score => {
                let s = mock_score(cos, &self.config, req.query_id, req.candidate_id);
                self.config.reply_format.replace(SCORE_PLACEHOLDER, &s.to_string())
            }
            RequestKind::Confidence => top[0].token.trim().to_owned(),
        };
        Ok(BackendReply {
            text,
            last_token_top_logprobs: Some(top),
        })
    }
}

/// Knows the gold candidate for every query: scores it 100 and everything
/// else 0, and answers the confidence prompt with certainty only for gold.
pub struct OracleBackend {
    gold: HashMap<String, String>,
}

impl OracleBackend {
    pub fn new(gold: HashMap<String, String>) -> Self {
        Self { gold }
    }

    fn is_gold(&self, query_id: &str, candidate_id: &str) -> bool {
        self.gold.get(query_id).is_some_and(|g| g == candidate_id)
    }
}

impl ScoringBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        if !self.gold.contains_key(req.query_id) {
            return Err(BackendError::UnknownPair {
                query_id: req.query_id.to_owned(),
                candidate_id: req.candidate_id.to_owned(),
            });
        }
        let hit = self.is_gold(req.query_id, req.candidate_id);
        let top = if hit {
            vec![TokenLogprob {
                token: "True".into(),
                logprob: 0.0,
            }]
        } else {
            vec![
                TokenLogprob {
                    token: "False".into(),
                    logprob: 0.5f64.ln(),
                },
                TokenLogprob {
                    token: "True".into(),
                    logprob: 0.5f64.ln(),
                },
            ]
        };
        let text = match req.kind {
            RequestKind::Score => if hit { "100" } else { "0" }.to_owned(),
            RequestKind::Confidence => top[0].token.clone(),
        };
        Ok(BackendReply {
            text,
            last_token_top_logprobs: Some(top),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::MultimodalContent;
    use crate::embedstore::Normalization;
    use crate::finescorer::{parse_score, ScorePrompt};

    fn backend(config: MockConfig) -> MockBackend {
        let store = EmbeddingStore::from_rows(
            "s",
            2,
            Normalization::None,
            vec![("c1".into(), vec![1.0, 0.0]), ("c2".into(), vec![0.0, 1.0])],
        )
        .unwrap();
        let queries = HashMap::from([("q".to_string(), vec![2.0, 0.0])]);
        MockBackend::new(queries, Arc::new(store), config)
    }

    fn ask(b: &MockBackend, cand: &str, kind: RequestKind) -> Result<BackendReply, BackendError> {
        let prompt = ScorePrompt::user(MultimodalContent::text("x").unwrap(), 4);
        b.complete(&BackendRequest {
            query_id: "q",
            candidate_id: cand,
            kind,
            prompt: &prompt,
        })
    }

    #[test]
    fn oracle_scores_gold_only() {
        let b = OracleBackend::new(HashMap::from([("q".to_string(), "c2".to_string())]));
        let prompt = ScorePrompt::user(MultimodalContent::text("x").unwrap(), 4);
        let ask = |cand: &str, kind| {
            b.complete(&BackendRequest {
                query_id: "q",
                candidate_id: cand,
                kind,
                prompt: &prompt,
            })
        };
        assert_eq!(ask("c2", RequestKind::Score).unwrap().text, "100");
        assert_eq!(ask("c1", RequestKind::Score).unwrap().text, "0");
        assert_eq!(ask("c2", RequestKind::Confidence).unwrap().text, "True");
        let err = b.complete(&BackendRequest {
            query_id: "other",
            candidate_id: "c1",
            kind: RequestKind::Score,
            prompt: &prompt,
        });
        assert!(matches!(err, Err(BackendError::UnknownPair { .. })));
    }

    #[test]
    fn perfect_pair_scores_100() {
        let b = backend(MockConfig::default());
        let r = ask(&b, "c1", RequestKind::Score).unwrap();
        assert_eq!(r.text, "100");
        r.validate().unwrap();
        assert_eq!(ask(&b, "c2", RequestKind::Score).unwrap().text, "0");
    }

    #[test]
    fn deterministic_replies() {
        let cfg = MockConfig {
            seed: 9,
            noise_sigma: 7.0,
            error_rate: 0.3,
            ..MockConfig::default()
        };
        let b = backend(cfg);
        for kind in [RequestKind::Score, RequestKind::Confidence] {
            assert_eq!(ask(&b, "c1", kind).unwrap(), ask(&b, "c1", kind).unwrap());
        }
    }

    #[test]
    fn unknown_pair() {
        let b = backend(MockConfig::default());
        assert!(matches!(
            ask(&b, "nope", RequestKind::Score),
            Err(BackendError::UnknownPair { .. })
        ));
    }

    #[test]
    fn quantized_levels() {
        let cfg = MockConfig {
            levels: Some(10),
            ..MockConfig::default()
        };
        for i in 0..=100 {
            let cos = f64::from(i) / 100.0 - 0.004;
            assert_eq!(mock_score(cos, &cfg, "q", "c") % 10, 0);
        }
    }

    #[test]
    fn reply_formats_parse_back() {
        for fmt in SHIPPED_REPLY_FORMATS {
            let cfg = MockConfig {
                reply_format: (*fmt).to_owned(),
                ..MockConfig::default()
            };
            let b = backend(cfg);
            assert_eq!(
                parse_score(&ask(&b, "c1", RequestKind::Score).unwrap().text).unwrap(),
                100
            );
        }
    }

    #[test]
    fn logprobs_sharpen_with_cosine() {
        let cfg = MockConfig::default();
        let hi = mock_top_logprobs(0.95, &cfg, "q", "c");
        let lo = mock_top_logprobs(0.10, &cfg, "q", "c");
        assert!(hi[0].logprob > lo[0].logprob);
        let mass: f64 = hi.iter().map(|t| t.logprob.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-9);
    }
}
