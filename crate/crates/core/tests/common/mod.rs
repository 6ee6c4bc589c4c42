#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use coarsefine_core::embedstore::{cosine_similarity, EmbeddingStore, Normalization};
use coarsefine_core::finescorer::TokenLogprob;
use coarsefine_core::mock::{mock_score, mock_top_logprobs, MockBackend, MockConfig};
use coarsefine_core::pipeline::{Corpus, PipelineConfig, Query};
use coarsefine_core::reinjection::Activation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss_vec(r: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

pub fn random_store(seed: u64, n: usize, dim: usize) -> EmbeddingStore {
    let mut r = rng(seed);
    let rows = (0..n).map(|i| (format!("c{i:04}"), gauss_vec(&mut r, dim))).collect();
    EmbeddingStore::from_rows("s", dim, Normalization::None, rows).unwrap()
}

fn oracle_cos(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Full sort of every row by (cosine desc, ordinal asc), truncated to k.
pub fn brute_topk(store: &EmbeddingStore, q: &[f32], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(usize, f64)> = (0..store.len()).map(|i| (i, oracle_cos(store.row(i), q))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter()
        .take(k)
        .map(|(i, c)| (store.ids()[i].clone(), c))
        .collect()
}

/// Entropy in nats of the renormalized distribution given by a top-K list.
pub fn oracle_entropy(top: &[TokenLogprob]) -> f64 {
    let mut merged: Vec<(String, f64)> = Vec::new();
    for t in top {
        let p = t.logprob.exp();
        if let Some(slot) = merged.iter_mut().find(|(tok, _)| *tok == t.token) {
            slot.1 += p;
        } else {
            merged.push((t.token.clone(), p));
        }
    }
    let z: f64 = merged.iter().map(|(_, p)| p).sum();
    let mut h = 0.0;
    for (_, p) in merged {
        let q = p / z;
        h -= q * q.ln();
    }
    h
}

/// Scalar-loop `sum_i phi(sum_r x_r w1[r][i]) w2[c][i]` over row-major weights.
pub fn oracle_ffn(act: Activation, w1: &[Vec<f64>], w2: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let hidden = w1[0].len();
    let mut out = vec![0.0; d];
    for i in 0..hidden {
        let mut pre = 0.0;
        for r in 0..d {
            pre += x[r] * w1[r][i];
        }
        let g = match act {
            Activation::Relu => {
                if pre > 0.0 {
                    pre
                } else {
                    0.0
                }
            }
            Activation::Silu => pre / (1.0 + (-pre).exp()),
        };
        for c in 0..d {
            out[c] += g * w2[c][i];
        }
    }
    out
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn text_queries(embeddings: Vec<(String, Vec<f32>)>) -> Vec<Query> {
    embeddings
        .into_iter()
        .map(|(id, embedding)| Query {
            content: coarsefine_core::MultimodalContent::text(format!("query {id}")).unwrap(),
            id,
            embedding,
        })
        .collect()
}

pub fn mock_for(queries: &[Query], store: Arc<EmbeddingStore>, config: MockConfig) -> MockBackend {
    let map: HashMap<String, Vec<f32>> = queries.iter().map(|q| (q.id.clone(), q.embedding.clone())).collect();
    MockBackend::new(map, store, config)
}

/// Top-1 chosen directly from the mock's outputs: best score, then lowest
/// entropy when tie-break is on (else coarse similarity), then id.
pub fn brute_force_top1(query: &Query, corpus: &Corpus, config: &PipelineConfig) -> String {
    let pool = brute_topk(&corpus.store, &query.embedding, config.k);
    let scored: Vec<(String, f64, u8)> = pool
        .into_iter()
        .map(|(id, coarse)| {
            let cos = cosine_similarity(&query.embedding, corpus.store.get(&id).unwrap()).unwrap();
            (id.clone(), coarse, mock_score(cos, &config.mock, &query.id, &id))
        })
        .collect();
    let best = scored.iter().map(|s| s.2).max().unwrap();
    let tied: Vec<&(String, f64, u8)> = scored.iter().filter(|s| s.2 == best).collect();
    if tied.len() == 1 {
        return tied[0].0.clone();
    }
    let mut ranked: Vec<(&String, f64, f64)> = tied
        .iter()
        .map(|(id, coarse, _)| {
            let cos = cosine_similarity(&query.embedding, corpus.store.get(id).unwrap()).unwrap();
            let h = if config.enable_tiebreak {
                oracle_entropy(&mock_top_logprobs(cos, &config.mock, &query.id, id))
            } else {
                0.0
            };
            (id, h, *coarse)
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap()
            .then(b.2.partial_cmp(&a.2).unwrap())
            .then(a.0.cmp(b.0))
    });
    if config.enable_tiebreak {
        // Entropy, then id; coarse similarity plays no part.
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(b.0)));
    }
    ranked[0].0.clone()
}
