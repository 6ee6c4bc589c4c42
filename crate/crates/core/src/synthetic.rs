//! Seeded Gaussian-cluster datasets for exercising the pipeline without
//! real encoders or models.
//!
//! Candidates are drawn around `clusters` random centres. Each query picks
//! a distinct gold candidate and perturbs its vector; `query_noise` sets how
//! often same-cluster distractors overtake the gold item in the coarse stage.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::content::MultimodalContent;
use crate::dataset::{Direction, RetrievalDataset};
use crate::embedstore::{EmbeddingStore, Normalization};
use crate::pipeline::{Corpus, Query};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub candidates: usize,
    pub queries: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Std-dev of candidates around their centre.
    pub cluster_spread: f64,
    /// Std-dev of the perturbation from gold vector to query.
    pub query_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            candidates: 200,
            queries: 50,
            dim: 16,
            clusters: 10,
            cluster_spread: 0.35,
            query_noise: 0.25,
            seed: 7,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

pub fn candidate_id(i: usize) -> String {
    format!("c{i:04}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:04}")
}

/// Generates a dataset; panics if `queries > candidates` or any size is 0.
pub fn generate(spec: &SyntheticSpec) -> RetrievalDataset {
    assert!(spec.dim > 0 && spec.clusters > 0 && spec.candidates > 0);
    assert!(
        spec.queries <= spec.candidates,
        "each query needs a distinct gold candidate"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres: Vec<Vec<f64>> = (0..spec.clusters).map(|_| gaussian(&mut rng, spec.dim, 1.0)).collect();

    let mut candidate_vecs = Vec::with_capacity(spec.candidates);
    for i in 0..spec.candidates {
        let centre = &centres[i % spec.clusters];
        let v: Vec<f64> = loop {
            let noise = gaussian(&mut rng, spec.dim, spec.cluster_spread);
            let v: Vec<f64> = centre.iter().zip(&noise).map(|(c, n)| c + n).collect();
            if v.iter().any(|x| *x as f32 != 0.0) {
                break v;
            }
        };
        candidate_vecs.push(v);
    }

    let golds = sample(&mut rng, spec.candidates, spec.queries).into_vec();
    let mut queries = Vec::with_capacity(spec.queries);
    let mut gold = Vec::with_capacity(spec.queries);
    for (qi, &g) in golds.iter().enumerate() {
        let noise = gaussian(&mut rng, spec.dim, spec.query_noise);
        let v: Vec<f64> = candidate_vecs[g].iter().zip(&noise).map(|(c, n)| c + n).collect();
        let id = query_id(qi);
        queries.push(Query {
            content: MultimodalContent::text(format!("query {id}")).expect("non-empty"),
            id,
            embedding: to_f32(&v),
        });
        gold.push(candidate_id(g));
    }

    let rows: Vec<(String, Vec<f32>)> = candidate_vecs
        .iter()
        .enumerate()
        .map(|(i, v)| (candidate_id(i), to_f32(v)))
        .collect();
    let contents: HashMap<String, MultimodalContent> = rows
        .iter()
        .map(|(id, _)| {
            (
                id.clone(),
                MultimodalContent::text(format!("candidate {id}")).expect("non-empty"),
            )
        })
        .collect();
    let store =
        EmbeddingStore::from_rows("candidates", spec.dim, Normalization::None, rows).expect("generated rows are valid");
    RetrievalDataset::new(
        spec.name.clone(),
        Direction::Generic,
        queries,
        gold,
        Corpus::with_contents(Arc::new(store), contents),
    )
    .expect("generated dataset is valid")
}
