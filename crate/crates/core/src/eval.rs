//! Recall@1 / Precision@1, coarse-stage hit rate, and the top-k sweep.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::RetrievalDataset;
use crate::embedstore::{coarse_topk, StoreError};
use crate::finescorer::ScoringBackend;
use crate::pipeline::{retrieve_batch_timed, PipelineConfig, PipelineError, RankedResult};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no results to score")]
    EmptyResults,
    #[error("no gold candidate for query {0:?}")]
    MissingGold(String),
    #[error("k grid must be non-empty, positive and strictly increasing")]
    InvalidGrid,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("csv write failed: {0}")]
    Io(#[from] std::io::Error),
}

pub const CSV_HEADER: &str = "dataset,k,recall_at_1,precision_at_1,pool_hit_rate,mean_backend_calls,mean_ms_per_query,fine_enabled,tiebreak_enabled";

/// Fraction of results whose first-ranked candidate is the gold one.
pub fn recall_at_1(results: &[RankedResult], gold: &HashMap<String, String>) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut hits = 0usize;
    for r in results {
        let g = gold
            .get(&r.query_id)
            .ok_or_else(|| EvalError::MissingGold(r.query_id.clone()))?;
        if r.top1() == Some(g.as_str()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Same quantity as [`recall_at_1`] when each query has one gold target.
pub fn precision_at_1(results: &[RankedResult], gold: &HashMap<String, String>) -> Result<f64, EvalError> {
    recall_at_1(results, gold)
}

/// Fraction of queries whose gold candidate survives `coarse_topk(k)`.
/// Upper bound on pipeline Recall@1 at the same k.
pub fn pool_hit_rate(dataset: &RetrievalDataset, k: usize) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut hits = 0usize;
    for (q, g) in dataset.queries.iter().zip(&dataset.gold) {
        if coarse_topk(&dataset.corpus.store, &q.embedding, k)?.contains(g) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub k: usize,
    pub recall_at_1: f64,
    pub precision_at_1: f64,
    pub pool_hit_rate: f64,
    pub mean_backend_calls: f64,
    pub max_backend_calls: u32,
    /// Largest `backend_calls - (pool size + tied set size)` over queries;
    /// positive only when retries happened.
    pub max_budget_excess: i64,
    pub mean_ms_per_query: f64,
    pub mean_backend_ms_per_query: f64,
    pub fine_enabled: bool,
    pub tiebreak_enabled: bool,
    /// Queries that errored; they count as misses.
    pub failed_queries: usize,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.4},{:.3},{},{}",
            self.dataset,
            self.k,
            self.recall_at_1,
            self.precision_at_1,
            self.pool_hit_rate,
            self.mean_backend_calls,
            self.mean_ms_per_query,
            self.fine_enabled,
            self.tiebreak_enabled
        )
    }
}

pub fn write_csv(reports: &[EvalReport], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Runs every query at `config.k` and summarizes. Returns the per-query
/// results alongside the report.
pub fn evaluate(
    dataset: &RetrievalDataset,
    config: &PipelineConfig,
    backend: &dyn ScoringBackend,
) -> Result<(EvalReport, Vec<RankedResult>), EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let outcomes = retrieve_batch_timed(&dataset.queries, &dataset.corpus, config, backend)?;
    let n = dataset.len() as f64;
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failed = 0;
    let (mut wall, mut backend_ms) = (0.0, 0.0);
    for (outcome, timing) in outcomes {
        wall += timing.wall_ms;
        backend_ms += timing.backend_ms;
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                tracing::warn!("query failed: {e}");
                failed += 1;
            }
        }
    }
    let gold = dataset.gold_map();
    let recall = if results.is_empty() {
        0.0
    } else {
        recall_at_1(&results, &gold)? * results.len() as f64 / n
    };
    let calls: Vec<u32> = results.iter().map(|r| r.backend_calls).collect();
    let max_budget_excess = results
        .iter()
        .map(|r| i64::from(r.backend_calls) - (r.ranking.len() + r.tied_set_size) as i64)
        .max()
        .unwrap_or(0);
    let report = EvalReport {
        dataset: dataset.name.clone(),
        k: config.k,
        recall_at_1: recall,
        precision_at_1: recall,
        pool_hit_rate: pool_hit_rate(dataset, config.k)?,
        mean_backend_calls: calls.iter().map(|c| f64::from(*c)).sum::<f64>() / n,
        max_backend_calls: calls.iter().copied().max().unwrap_or(0),
        max_budget_excess,
        mean_ms_per_query: wall / n,
        mean_backend_ms_per_query: backend_ms / n,
        fine_enabled: config.enable_fine_stage,
        tiebreak_enabled: config.enable_tiebreak,
        failed_queries: failed,
    };
    Ok((report, results))
}

/// One [`evaluate`] per k in `ks` (strictly increasing).
pub fn sweep_k(
    ks: &[usize],
    dataset: &RetrievalDataset,
    config: &PipelineConfig,
    backend: &dyn ScoringBackend,
) -> Result<Vec<EvalReport>, EvalError> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidGrid);
    }
    ks.iter()
        .map(|&k| {
            let cfg = PipelineConfig { k, ..config.clone() };
            evaluate(dataset, &cfg, backend).map(|(r, _)| r)
        })
        .collect()
}
