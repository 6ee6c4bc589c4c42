//! One retrieval end to end: coarse top-k, generative rescoring of the
//! pool, entropy tie-break among top-scored candidates, final ordering.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering as AtomicOrdering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{ContentError, MultimodalContent};
use crate::embedstore::{coarse_topk, CandidatePool, EmbeddingStore, StoreError};
use crate::finescorer::{
    complete_request, score_pair, BackendError, BackendReply, BackendRequest, FineScore, RequestKind, ScoreError,
    ScorerConfig, ScoringBackend,
};
use crate::http::HttpConfig;
use crate::mock::{MockBackend, MockConfig};
use crate::reinjection::DEFAULT_ALPHA;
use crate::tiebreak::{
    break_ties, build_confidence_prompt, distribution_from_top_logprobs, EntropyScore, DEFAULT_TOP_LOGPROBS,
};
use crate::util::{bounded_map, Stopwatch};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error("fine stage failed in strict mode: {0}")]
    BackendUnavailable(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: usize,
    /// Injection ratio; recorded with every run, exercised by the kernel.
    pub alpha: f64,
    pub enable_fine_stage: bool,
    pub enable_tiebreak: bool,
    /// Fail instead of degrading to coarse order on backend errors.
    pub strict: bool,
    /// Maximum backend calls in flight.
    pub jobs: usize,
    pub backend: BackendKind,
    /// Replaces `scorer.template` with the file's contents when set.
    pub score_template_path: Option<PathBuf>,
    pub top_logprobs: u32,
    pub scorer: ScorerConfig,
    pub mock: MockConfig,
    pub http: HttpConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            enable_fine_stage: true,
            enable_tiebreak: true,
            strict: false,
            jobs: 4,
            backend: BackendKind::Mock,
            score_template_path: None,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
            scorer: ScorerConfig::default(),
            mock: MockConfig::default(),
            http: HttpConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::InvalidConfig("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PipelineError::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.top_logprobs == 0 {
            return Err(PipelineError::InvalidConfig("top_logprobs must be positive".into()));
        }
        Ok(())
    }

    /// Loads `score_template_path` into the scorer config.
    pub fn load_templates(&mut self) -> std::io::Result<()> {
        if let Some(path) = &self.score_template_path {
            self.scorer.template = std::fs::read_to_string(path)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub content: MultimodalContent,
    pub embedding: Vec<f32>,
}

/// Candidate vectors plus the payloads shown to the fine-stage model.
/// Candidates without a payload are presented by their id as text.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub store: Arc<EmbeddingStore>,
    pub contents: HashMap<String, MultimodalContent>,
}

impl Corpus {
    pub fn new(store: Arc<EmbeddingStore>) -> Self {
        Self {
            store,
            contents: HashMap::new(),
        }
    }

    pub fn with_contents(store: Arc<EmbeddingStore>, contents: HashMap<String, MultimodalContent>) -> Self {
        Self { store, contents }
    }

    pub fn content(&self, candidate_id: &str) -> Result<MultimodalContent, ContentError> {
        match self.contents.get(candidate_id) {
            Some(c) => Ok(c.clone()),
            None => MultimodalContent::text(candidate_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub candidate_id: String,
    pub coarse_similarity: f64,
    pub fine_score: Option<u8>,
    pub entropy: Option<f64>,
    pub tie_break_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub ranking: Vec<RankedEntry>,
    /// Fine stage disabled, or every fine call failed.
    pub degraded: bool,
    /// All backend requests for this query, retries included.
    pub backend_calls: u32,
    /// Candidates sharing the top fine score (0 when no fine scores).
    pub tied_set_size: usize,
    pub warnings: Vec<String>,
}

impl RankedResult {
    pub fn top1(&self) -> Option<&str> {
        self.ranking.first().map(|e| e.candidate_id.as_str())
    }
}

/// Wall-clock breakdown for one query; kept out of [`RankedResult`] so
/// result files stay byte-identical across reruns.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QueryTiming {
    pub wall_ms: f64,
    /// Summed latency of fine-stage scoring calls.
    pub backend_ms: f64,
}

struct CountingBackend<'a> {
    inner: &'a dyn ScoringBackend,
    calls: AtomicU32,
}

impl ScoringBackend for CountingBackend<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, AtomicOrdering::Relaxed);
        self.inner.complete(request)
    }
}

/// Final order: fine score desc (missing last), entropy asc (missing last),
/// coarse similarity desc, id asc.
pub fn composite_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    fn desc_opt<T: Ord>(a: Option<T>, b: Option<T>) -> Ordering {
        match (a, b) {
            (Some(x), Some(y)) => y.cmp(&x),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    }
    let entropy = match (a.entropy, b.entropy) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    desc_opt(a.fine_score, b.fine_score)
        .then(entropy)
        .then(b.coarse_similarity.total_cmp(&a.coarse_similarity))
        .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

fn coarse_entries(pool: &CandidatePool) -> Vec<RankedEntry> {
    pool.entries
        .iter()
        .map(|e| RankedEntry {
            candidate_id: e.candidate_id.clone(),
            coarse_similarity: e.coarse_similarity,
            fine_score: None,
            entropy: None,
            tie_break_applied: false,
        })
        .collect()
}

fn failure_message(e: &ScoreError) -> Option<String> {
    match e {
        ScoreError::Backend(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Runs one query through the pipeline.
pub fn retrieve(
    query: &Query,
    corpus: &Corpus,
    config: &PipelineConfig,
    backend: &dyn ScoringBackend,
) -> Result<RankedResult, PipelineError> {
    retrieve_timed(query, corpus, config, backend, config.jobs).map(|(r, _)| r)
}

fn retrieve_timed(
    query: &Query,
    corpus: &Corpus,
    config: &PipelineConfig,
    backend: &dyn ScoringBackend,
    jobs: usize,
) -> Result<(RankedResult, QueryTiming), PipelineError> {
    config.validate()?;
    let clock = Stopwatch::start();
    let pool = coarse_topk(&corpus.store, &query.embedding, config.k)?;
    let mut ranking = coarse_entries(&pool);
    let mut warnings = Vec::new();
    let counting = CountingBackend {
        inner: backend,
        calls: AtomicU32::new(0),
    };
    let finish = |ranking, degraded, tied_set_size, warnings, backend_ms| {
        let result = RankedResult {
            query_id: query.id.clone(),
            ranking,
            degraded,
            backend_calls: counting.calls.load(AtomicOrdering::Relaxed),
            tied_set_size,
            warnings,
        };
        let timing = QueryTiming {
            wall_ms: clock.elapsed_ms(),
            backend_ms,
        };
        Ok((result, timing))
    };

    if !config.enable_fine_stage {
        return finish(ranking, true, 0, warnings, 0.0);
    }

    let contents: Vec<MultimodalContent> = pool
        .entries
        .iter()
        .map(|e| corpus.content(&e.candidate_id))
        .collect::<Result<_, _>>()?;
    let order: Vec<usize> = (0..pool.len()).collect();
    let scored: Vec<Result<FineScore, ScoreError>> = bounded_map(&order, jobs, |&i| {
        score_pair(
            &counting,
            &query.id,
            &query.content,
            &pool.entries[i].candidate_id,
            &contents[i],
            &config.scorer,
        )
    });

    let mut backend_ms = 0.0;
    let mut failures = 0;
    for (entry, outcome) in ranking.iter_mut().zip(scored) {
        match outcome {
            Ok(fs) => {
                backend_ms += fs.backend_latency_ms;
                if fs.parse_failed {
                    warnings.push(format!(
                        "{}: no score in reply {:?}; scored 0",
                        entry.candidate_id, fs.raw_text
                    ));
                }
                entry.fine_score = Some(fs.score);
            }
            Err(e) => {
                let Some(msg) = failure_message(&e) else {
                    return Err(e.into());
                };
                if config.strict {
                    return Err(PipelineError::BackendUnavailable(msg));
                }
                failures += 1;
                warnings.push(format!("{}: fine scoring failed: {msg}", entry.candidate_id));
            }
        }
    }
    if failures == ranking.len() {
        warnings.push("fine stage unavailable; using coarse order".into());
        return finish(ranking, true, 0, warnings, backend_ms);
    }

    let top = ranking.iter().filter_map(|e| e.fine_score).max();
    let tied: Vec<usize> = ranking
        .iter()
        .enumerate()
        .filter(|(_, e)| e.fine_score.is_some() && e.fine_score == top)
        .map(|(i, _)| i)
        .collect();

    let mut winner: Option<String> = None;
    if config.enable_tiebreak && tied.len() >= 2 {
        let entropies = bounded_map(&tied, jobs, |&i| {
            confidence_entropy(&counting, query, &ranking[i].candidate_id, &contents[i], config)
        });
        let mut scores = Vec::new();
        for (&i, outcome) in tied.iter().zip(entropies) {
            match outcome {
                Ok(es) => {
                    ranking[i].entropy = Some(es.h_raw);
                    ranking[i].tie_break_applied = true;
                    scores.push(es);
                }
                Err(msg) => {
                    if config.strict {
                        return Err(PipelineError::BackendUnavailable(msg));
                    }
                    warnings.push(format!("{}: confidence scoring failed: {msg}", ranking[i].candidate_id));
                }
            }
        }
        winner = break_ties(&scores).ok().map(str::to_owned);
    }

    ranking.sort_by(composite_order);
    if let Some(w) = winner {
        // Exact entropy ties resolve by id, which may differ from the
        // coarse-similarity step of the composite order.
        if let Some(pos) = ranking.iter().position(|e| e.candidate_id == w) {
            ranking[..=pos].rotate_right(1);
        }
    }
    finish(ranking, false, tied.len(), warnings, backend_ms)
}

fn confidence_entropy(
    backend: &dyn ScoringBackend,
    query: &Query,
    candidate_id: &str,
    candidate: &MultimodalContent,
    config: &PipelineConfig,
) -> Result<EntropyScore, String> {
    let mut prompt = build_confidence_prompt(&query.content, candidate).map_err(|e| e.to_string())?;
    prompt.top_logprobs = Some(config.top_logprobs);
    let request = BackendRequest {
        query_id: &query.id,
        candidate_id,
        kind: RequestKind::Confidence,
        prompt: &prompt,
    };
    let (reply, _) = complete_request(backend, &request, config.scorer.max_retries);
    let reply = reply.map_err(|e| e.to_string())?;
    let top = reply
        .last_token_top_logprobs
        .ok_or_else(|| "backend returned no logprobs".to_owned())?;
    let dist = distribution_from_top_logprobs(&top).map_err(|e| e.to_string())?;
    EntropyScore::from_distribution(candidate_id, &dist).map_err(|e| e.to_string())
}

pub type QueryOutcome = Result<RankedResult, PipelineError>;

/// Retrieves every query, at most `config.jobs` backend calls in flight.
/// Results are in query order and identical to sequential [`retrieve`].
///
/// Per-query errors are collected; in strict mode the first error (in
/// query order) is returned instead.
pub fn retrieve_batch(
    queries: &[Query],
    corpus: &Corpus,
    config: &PipelineConfig,
    backend: &dyn ScoringBackend,
) -> Result<Vec<QueryOutcome>, PipelineError> {
    retrieve_batch_timed(queries, corpus, config, backend).map(|v| v.into_iter().map(|(r, _)| r).collect())
}

pub fn retrieve_batch_timed(
    queries: &[Query],
    corpus: &Corpus,
    config: &PipelineConfig,
    backend: &dyn ScoringBackend,
) -> Result<Vec<(QueryOutcome, QueryTiming)>, PipelineError> {
    config.validate()?;
    // Parallelize across queries; each query's own calls run serially so the
    // in-flight total stays within `jobs`.
    let outcomes = bounded_map(queries, config.jobs, |q| {
        match retrieve_timed(q, corpus, config, backend, 1) {
            Ok((r, t)) => (Ok(r), t),
            Err(e) => (Err(e), QueryTiming::default()),
        }
    });
    if config.strict {
        if let Some(pos) = outcomes.iter().position(|(o, _)| o.is_err()) {
            let (err, _) = outcomes.into_iter().nth(pos).expect("position is valid");
            return Err(err.expect_err("checked above"));
        }
    }
    Ok(outcomes)
}

/// Builds the backend named in the config. The mock needs every query's
/// embedding to act as an oracle.
pub fn make_backend(
    config: &PipelineConfig,
    queries: &[Query],
    store: Arc<EmbeddingStore>,
) -> Result<Box<dyn ScoringBackend>, PipelineError> {
    match config.backend {
        BackendKind::Mock => {
            let map = queries.iter().map(|q| (q.id.clone(), q.embedding.clone())).collect();
            Ok(Box::new(MockBackend::new(map, store, config.mock.clone())))
        }
        #[cfg(feature = "http")]
        BackendKind::Http => Ok(Box::new(crate::http::HttpBackend::new(config.http.clone()))),
        #[cfg(not(feature = "http"))]
        BackendKind::Http => Err(PipelineError::InvalidConfig("built without the `http` feature".into())),
    }
}
