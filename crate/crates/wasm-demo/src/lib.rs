//! Browser bindings for coarsefine-core. Every export takes plain numbers or
//! a JSON string and returns a JSON string; the `*_json` functions hold the
//! logic and run on any target.

use coarsefine_core::eval::sweep_k;
use coarsefine_core::finescorer::TokenLogprob;
use coarsefine_core::mock::{MockBackend, OracleBackend};
use coarsefine_core::pipeline::PipelineConfig;
use coarsefine_core::reinjection::{
    ffn_fused, ffn_keyvalue, ffn_matrix, relative_deviation, visual_correction, Activation, FfnParams, VisualTokenSet,
};
use coarsefine_core::synthetic::{generate, SyntheticSpec};
use coarsefine_core::tiebreak::{break_ties, distribution_from_top_logprobs, EntropyScore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_DIM: usize = 8;
const MAX_HIDDEN: usize = 32;
const MAX_CANDIDATES: usize = 2000;
const MAX_QUERIES: usize = 500;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_rows(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Fused block output across `steps + 1` evenly spaced alphas for a random
/// layer, input and visual token set.
pub fn fusion_curve_json(
    seed: u64,
    dim: usize,
    hidden: usize,
    tokens: usize,
    silu: bool,
    steps: usize,
) -> Result<String, String> {
    if !(1..=MAX_DIM).contains(&dim) || !(1..=MAX_HIDDEN).contains(&hidden) {
        return Err(format!("dim must be 1..={MAX_DIM}, hidden 1..={MAX_HIDDEN}"));
    }
    if steps == 0 || steps > 200 {
        return Err("steps must be 1..=200".into());
    }
    let activation = if silu { Activation::Silu } else { Activation::Relu };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let params = FfnParams::from_rows(
        &random_rows(&mut r, dim, hidden),
        &random_rows(&mut r, dim, hidden),
        activation,
    )
    .map_err(|e| e.to_string())?;
    let x: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
    let zv = VisualTokenSet::new(dim, random_rows(&mut r, tokens.min(16), dim)).map_err(|e| e.to_string())?;

    let vanilla = ffn_matrix(&x, &params).map_err(|e| e.to_string())?;
    let keyvalue = ffn_keyvalue(&x, &params).map_err(|e| e.to_string())?;
    let correction = visual_correction(&x, &zv, activation).map_err(|e| e.to_string())?;
    let mut alphas = Vec::with_capacity(steps + 1);
    let mut outputs = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let alpha = i as f64 / steps as f64;
        outputs.push(ffn_fused(&x, &params, &zv, alpha).map_err(|e| e.to_string())?);
        alphas.push(alpha);
    }
    Ok(json!({
        "alphas": alphas,
        "outputs": outputs,
        "ffn_norm": norm(&vanilla),
        "correction_norm": norm(&correction),
        "kv_deviation": relative_deviation(&vanilla, &keyvalue),
    })
    .to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TieCandidate {
    id: String,
    /// Probability of the leading token.
    p_top: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TieRequest {
    candidates: Vec<TieCandidate>,
    /// Tokens sharing the remaining mass evenly.
    #[serde(default = "default_tail")]
    tail: usize,
}

fn default_tail() -> usize {
    4
}

#[derive(Debug, Serialize)]
struct TieRow {
    id: String,
    /// `(token, probability)` after renormalization.
    probs: Vec<(String, f64)>,
    h_raw: f64,
    h_normalized: f64,
}

/// Entropy of each tied candidate's confidence distribution and the
/// candidate the tie-break picks.
pub fn tie_break_json(request: &str) -> Result<String, String> {
    let req: TieRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if req.tail > 16 {
        return Err("tail must be at most 16".into());
    }
    let mut rows = Vec::with_capacity(req.candidates.len());
    let mut scores = Vec::with_capacity(req.candidates.len());
    for c in &req.candidates {
        if !(c.p_top > 0.0 && c.p_top <= 1.0) {
            return Err(format!("{}: p_top must be in (0, 1]", c.id));
        }
        let mut top = vec![TokenLogprob {
            token: "True".into(),
            logprob: c.p_top.ln(),
        }];
        let rest = 1.0 - c.p_top;
        if rest > 0.0 && req.tail > 0 {
            for i in 0..req.tail {
                top.push(TokenLogprob {
                    token: format!("tok{i}"),
                    logprob: (rest / req.tail as f64).ln(),
                });
            }
        }
        let dist = distribution_from_top_logprobs(&top).map_err(|e| e.to_string())?;
        let score = EntropyScore::from_distribution(c.id.clone(), &dist).map_err(|e| e.to_string())?;
        rows.push(TieRow {
            id: c.id.clone(),
            probs: dist.probs.clone(),
            h_raw: score.h_raw,
            h_normalized: score.h_normalized,
        });
        scores.push(score);
    }
    let winner = break_ties(&scores).map_err(|e| e.to_string())?;
    Ok(json!({ "candidates": rows, "winner": winner }).to_string())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepRequest {
    seed: u64,
    candidates: usize,
    queries: usize,
    query_noise: f64,
    /// "mock" or "oracle".
    backend: String,
    levels: Option<u32>,
    noise_sigma: f64,
    ks: Vec<usize>,
    tiebreak: bool,
}

impl Default for SweepRequest {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        Self {
            seed: spec.seed,
            candidates: spec.candidates,
            queries: spec.queries,
            query_noise: spec.query_noise,
            backend: "mock".into(),
            levels: Some(10),
            noise_sigma: 0.0,
            ks: vec![1, 3, 5, 7, 9],
            tiebreak: true,
        }
    }
}

/// Coarse-then-fine runs over a synthetic dataset, one row per k.
pub fn synthetic_sweep_json(request: &str) -> Result<String, String> {
    let req: SweepRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if req.candidates > MAX_CANDIDATES || req.queries > MAX_QUERIES {
        return Err(format!("at most {MAX_CANDIDATES} candidates and {MAX_QUERIES} queries"));
    }
    let spec = SyntheticSpec {
        name: "demo".into(),
        candidates: req.candidates,
        queries: req.queries,
        query_noise: req.query_noise,
        seed: req.seed,
        ..SyntheticSpec::default()
    };
    if spec.candidates == 0 || spec.queries == 0 || spec.queries > spec.candidates {
        return Err("need 1 <= queries <= candidates".into());
    }
    let ds = generate(&spec);
    let mut cfg = PipelineConfig {
        jobs: 1,
        enable_tiebreak: req.tiebreak,
        ..PipelineConfig::default()
    };
    cfg.mock.seed = req.seed;
    cfg.mock.levels = req.levels;
    cfg.mock.noise_sigma = req.noise_sigma;
    let reports = match req.backend.as_str() {
        "oracle" => sweep_k(&req.ks, &ds, &cfg, &OracleBackend::new(ds.gold_map())),
        "mock" => {
            let qmap = ds.queries.iter().map(|q| (q.id.clone(), q.embedding.clone())).collect();
            let backend = MockBackend::new(qmap, ds.corpus.store.clone(), cfg.mock.clone());
            sweep_k(&req.ks, &ds, &cfg, &backend)
        }
        other => return Err(format!("unknown backend {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    let rows: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "k": r.k,
                "recall_at_1": r.recall_at_1,
                "pool_hit_rate": r.pool_hit_rate,
                "mean_backend_calls": r.mean_backend_calls,
                "max_budget_excess": r.max_budget_excess,
            })
        })
        .collect();
    Ok(json!({ "backend": req.backend, "rows": rows }).to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn fusion_curve(seed: u32, dim: u32, hidden: u32, tokens: u32, silu: bool, steps: u32) -> Result<String, JsValue> {
    js(fusion_curve_json(
        u64::from(seed),
        dim as usize,
        hidden as usize,
        tokens as usize,
        silu,
        steps as usize,
    ))
}

#[wasm_bindgen]
pub fn tie_break(request: &str) -> Result<String, JsValue> {
    js(tie_break_json(request))
}

#[wasm_bindgen]
pub fn synthetic_sweep(request: &str) -> Result<String, JsValue> {
    js(synthetic_sweep_json(request))
}
