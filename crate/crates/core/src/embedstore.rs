//! Embedding files, the in-memory candidate matrix, and exact cosine top-k.
//!
//! On-disk layout is a JSON manifest next to two files:
//!
//! * `ids_file`: UTF-8, one id per line, newline-terminated.
//! * `data_file`: raw row-major `f32` little-endian values, no header.
//!
//! Row `i` of the data file belongs to line `i` of the ids file.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on row norms when the manifest claims L2 normalization.
pub const L2_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {}: {reason}", path.display())]
    InvalidManifest { path: PathBuf, reason: String },
    #[error("size mismatch in {}: expected {expected} bytes, found {actual}", path.display())]
    SizeMismatch { path: PathBuf, expected: u64, actual: u64 },
    #[error("id count mismatch in {}: manifest says {expected}, file has {actual}", path.display())]
    CountMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("empty id at line {0}")]
    EmptyId(usize),
    #[error("zero vector for id {0:?}")]
    ZeroVector(String),
    #[error("non-finite value in vector for id {0:?}")]
    NonFinite(String),
    #[error("row {id:?} has norm {norm} but manifest declares l2 normalization")]
    NotNormalized { id: String, norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector")]
    ZeroQuery,
    #[error("store is empty")]
    EmptyStore,
    #[error("k must be at least 1")]
    InvalidK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32le,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingManifest {
    pub dim: usize,
    pub count: usize,
    pub dtype: Dtype,
    pub normalization: Normalization,
    /// Relative to the manifest's directory.
    pub ids_file: PathBuf,
    /// Relative to the manifest's directory.
    pub data_file: PathBuf,
}

/// Immutable id-indexed matrix of candidate vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    manifest: EmbeddingManifest,
    ids: Vec<String>,
    matrix: Vec<f32>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

/// One coarse-stage survivor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub candidate_id: String,
    pub coarse_similarity: f64,
}

/// Top-k survivors of the coarse stage, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub entries: Vec<PoolEntry>,
    pub k_requested: usize,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, candidate_id: &str) -> bool {
        self.entries.iter().any(|e| e.candidate_id == candidate_id)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            StoreError::MissingFile(path.to_path_buf())
        } else {
            StoreError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Loads and validates a store from its manifest.
pub fn ingest_embeddings(manifest_path: impl AsRef<Path>) -> Result<EmbeddingStore, StoreError> {
    let manifest_path = manifest_path.as_ref();
    let raw = read_file(manifest_path)?;
    let manifest: EmbeddingManifest = serde_json::from_slice(&raw).map_err(|e| StoreError::InvalidManifest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if manifest.dim == 0 {
        return Err(StoreError::InvalidManifest {
            path: manifest_path.to_path_buf(),
            reason: "dim must be at least 1".into(),
        });
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let ids_path = base.join(&manifest.ids_file);
    let data_path = base.join(&manifest.data_file);

    let ids_raw = read_file(&ids_path)?;
    let ids_text = String::from_utf8(ids_raw).map_err(|e| StoreError::InvalidManifest {
        path: ids_path.clone(),
        reason: format!("ids file is not UTF-8: {e}"),
    })?;
    if !ids_text.is_empty() && !ids_text.ends_with('\n') {
        return Err(StoreError::InvalidManifest {
            path: ids_path,
            reason: "ids file must be newline-terminated".into(),
        });
    }
    let ids: Vec<String> = ids_text.lines().map(str::to_owned).collect();
    if ids.len() != manifest.count {
        return Err(StoreError::CountMismatch {
            path: ids_path,
            expected: manifest.count,
            actual: ids.len(),
        });
    }

    let data = read_file(&data_path)?;
    let expected = (manifest.count * manifest.dim * 4) as u64;
    if data.len() as u64 != expected {
        return Err(StoreError::SizeMismatch {
            path: data_path,
            expected,
            actual: data.len() as u64,
        });
    }
    let matrix: Vec<f32> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    EmbeddingStore::build(manifest, ids, matrix)
}

impl EmbeddingStore {
    /// Builds a store from rows already in memory. The manifest's file
    /// fields are set to `<name>.ids` / `<name>.f32`, used by [`Self::write`].
    pub fn from_rows(
        name: &str,
        dim: usize,
        normalization: Normalization,
        rows: Vec<(String, Vec<f32>)>,
    ) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::InvalidManifest {
                path: PathBuf::from(name),
                reason: "dim must be at least 1".into(),
            });
        }
        let mut ids = Vec::with_capacity(rows.len());
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        for (id, row) in rows {
            if row.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            ids.push(id);
            matrix.extend_from_slice(&row);
        }
        let manifest = EmbeddingManifest {
            dim,
            count: ids.len(),
            dtype: Dtype::F32le,
            normalization,
            ids_file: PathBuf::from(format!("{name}.ids")),
            data_file: PathBuf::from(format!("{name}.f32")),
        };
        Self::build(manifest, ids, matrix)
    }

    fn build(manifest: EmbeddingManifest, ids: Vec<String>, matrix: Vec<f32>) -> Result<Self, StoreError> {
        let dim = manifest.dim;
        let mut index = HashMap::with_capacity(ids.len());
        let mut norms = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(StoreError::EmptyId(i + 1));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(StoreError::DuplicateId(id.clone()));
            }
            let row = &matrix[i * dim..(i + 1) * dim];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite(id.clone()));
            }
            let norm = norm(row);
            if norm == 0.0 {
                return Err(StoreError::ZeroVector(id.clone()));
            }
            if manifest.normalization == Normalization::L2 && (norm - 1.0).abs() > L2_NORM_TOLERANCE {
                return Err(StoreError::NotNormalized { id: id.clone(), norm });
            }
            norms.push(norm);
        }
        Ok(Self {
            manifest,
            ids,
            matrix,
            norms,
            index,
        })
    }

    /// Writes ids, data and manifest into `dir`, returning the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>, manifest_name: &str) -> std::io::Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut ids = String::new();
        for id in &self.ids {
            ids.push_str(id);
            ids.push('\n');
        }
        fs::write(dir.join(&self.manifest.ids_file), ids)?;
        let bytes: Vec<u8> = self.matrix.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&self.manifest.data_file), bytes)?;
        let path = dir.join(manifest_name);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(path)
    }

    pub fn manifest(&self) -> &EmbeddingManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, ordinal: usize) -> &[f32] {
        let d = self.manifest.dim;
        &self.matrix[ordinal * d..(ordinal + 1) * d]
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.ordinal(id).map(|i| self.row(i))
    }

    /// Row norms in the order of [`Self::ids`].
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Summary statistics of row norms: (min, mean, max).
    pub fn norm_stats(&self) -> Option<(f64, f64, f64)> {
        if self.norms.is_empty() {
            return None;
        }
        let min = self.norms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.norms.iter().sum::<f64>() / self.norms.len() as f64;
        Some((min, mean, max))
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity accumulated in `f64`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, StoreError> {
    if a.len() != b.len() {
        return Err(StoreError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(StoreError::ZeroQuery);
    }
    Ok(cosine_with_norms(a, na, b, nb))
}

// Heap element ordered so that the *worst* retained candidate is at the top:
// lower similarity is worse, and on equal similarity the larger ordinal is worse.
#[derive(Debug, PartialEq)]
struct Worst {
    sim: f64,
    ordinal: usize,
}

impl Eq for Worst {}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other.sim.total_cmp(&self.sim).then(self.ordinal.cmp(&other.ordinal))
    }
}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact top-k by cosine similarity using a bounded heap of size `k`.
///
/// Ties are broken by ascending store ordinal, so the result is a
/// deterministic function of the store and the query.
pub fn coarse_topk(store: &EmbeddingStore, query: &[f32], k: usize) -> Result<CandidatePool, StoreError> {
    if k == 0 {
        return Err(StoreError::InvalidK);
    }
    if query.len() != store.dim() {
        return Err(StoreError::DimensionMismatch {
            expected: store.dim(),
            actual: query.len(),
        });
    }
    if store.is_empty() {
        return Err(StoreError::EmptyStore);
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(StoreError::ZeroQuery);
    }

    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for ordinal in 0..store.len() {
        let sim = cosine_with_norms(query, qn, store.row(ordinal), store.norms[ordinal]);
        let item = Worst { sim, ordinal };
        if heap.len() < k {
            heap.push(item);
        } else if let Some(top) = heap.peek() {
            // `item < top` in heap order means item is better than the current worst.
            if item < *top {
                heap.pop();
                heap.push(item);
            }
        }
    }
    // into_sorted_vec is ascending in heap order, i.e. best first.
    let entries = heap
        .into_sorted_vec()
        .into_iter()
        .map(|w| PoolEntry {
            candidate_id: store.ids[w.ordinal].clone(),
            coarse_similarity: w.sim,
        })
        .collect();
    Ok(CandidatePool {
        entries,
        k_requested: k,
    })
}

/// Ids in `ids` that do not appear in the store.
pub fn missing_ids<'a>(store: &EmbeddingStore, ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    ids.into_iter()
        .filter(|id| store.ordinal(id).is_none() && seen.insert(*id))
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, dim: usize, count: usize, ids: &str, data: &[u8]) -> PathBuf {
        fs::write(dir.join("v.ids"), ids).unwrap();
        fs::write(dir.join("v.f32"), data).unwrap();
        let m = format!(
            r#"{{"dim":{dim},"count":{count},"dtype":"f32le","normalization":"none","ids_file":"v.ids","data_file":"v.f32"}}"#
        );
        let p = dir.join("manifest.json");
        fs::write(&p, m).unwrap();
        p
    }

    fn floats(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn ingest_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(dir.path(), 2, 0, "", &[]);
        let store = ingest_embeddings(p).unwrap();
        assert_eq!(store.len(), 0);
        assert_eq!(store.dim(), 2);
    }

    #[test]
    fn ingest_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let data = floats(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(data.len(), 24);
        let p = write_raw(dir.path(), 2, 3, "a\nb\nc\n", &data);
        let store = ingest_embeddings(p).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.get("c").unwrap(), &[1.0, 1.0]);
        assert_eq!(store.ordinal("b"), Some(1));
    }

    #[test]
    fn ingest_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(dir.path(), 2, 3, "a\nb\nc\n", &[0u8; 20]);
        match ingest_embeddings(p) {
            Err(StoreError::SizeMismatch { expected, actual, .. }) => assert_eq!((expected, actual), (24, 20)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_duplicates_and_zero_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(dir.path(), 1, 2, "a\na\n", &floats(&[1.0, 2.0]));
        assert!(matches!(ingest_embeddings(&p), Err(StoreError::DuplicateId(id)) if id == "a"));

        let p = write_raw(dir.path(), 1, 2, "a\nb\n", &floats(&[1.0, 0.0]));
        assert!(matches!(ingest_embeddings(&p), Err(StoreError::ZeroVector(id)) if id == "b"));
    }

    #[test]
    fn ingest_missing_file_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_embeddings(dir.path().join("nope.json")),
            Err(StoreError::MissingFile(_))
        ));
        let p = write_raw(dir.path(), 1, 3, "a\nb\n", &floats(&[1.0, 2.0, 3.0]));
        assert!(matches!(
            ingest_embeddings(p),
            Err(StoreError::CountMismatch {
                expected: 3,
                actual: 2,
                ..
            })
        ));
    }

    #[test]
    fn l2_flag_is_checked() {
        let rows = vec![("a".to_string(), vec![3.0, 4.0])];
        let err = EmbeddingStore::from_rows("s", 2, Normalization::L2, rows).unwrap_err();
        assert!(matches!(err, StoreError::NotNormalized { .. }));
        let rows = vec![("a".to_string(), vec![0.6, 0.8])];
        EmbeddingStore::from_rows("s", 2, Normalization::L2, rows).unwrap();
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(StoreError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(StoreError::ZeroQuery)
        ));
    }

    #[test]
    fn topk_returns_all_when_k_exceeds_n() {
        let rows = vec![
            ("a".to_string(), vec![1.0, 0.0]),
            ("b".to_string(), vec![0.0, 1.0]),
            ("c".to_string(), vec![1.0, 1.0]),
        ];
        let store = EmbeddingStore::from_rows("s", 2, Normalization::None, rows).unwrap();
        let pool = coarse_topk(&store, &[1.0, 0.2], 5).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.k_requested, 5);
        let ids: Vec<_> = pool.entries.iter().map(|e| e.candidate_id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
    }

    #[test]
    fn topk_self_match() {
        let rows = vec![
            ("a".to_string(), vec![1.0, 2.0, 3.0]),
            ("b".to_string(), vec![-1.0, 0.5, 2.0]),
            ("c".to_string(), vec![0.3, 0.3, -4.0]),
        ];
        let store = EmbeddingStore::from_rows("s", 3, Normalization::None, rows).unwrap();
        let pool = coarse_topk(&store, &[-1.0, 0.5, 2.0], 1).unwrap();
        assert_eq!(pool.entries[0].candidate_id, "b");
        assert!((pool.entries[0].coarse_similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_ties_by_ordinal() {
        let rows = vec![
            ("z".to_string(), vec![1.0, 0.0]),
            ("y".to_string(), vec![2.0, 0.0]),
            ("x".to_string(), vec![3.0, 0.0]),
        ];
        let store = EmbeddingStore::from_rows("s", 2, Normalization::None, rows).unwrap();
        let pool = coarse_topk(&store, &[1.0, 0.0], 2).unwrap();
        let ids: Vec<_> = pool.entries.iter().map(|e| e.candidate_id.as_str()).collect();
        assert_eq!(ids, ["z", "y"]);
    }

    #[test]
    fn topk_errors() {
        let rows = vec![("a".to_string(), vec![1.0, 0.0])];
        let store = EmbeddingStore::from_rows("s", 2, Normalization::None, rows).unwrap();
        assert!(matches!(
            coarse_topk(&store, &[1.0], 1),
            Err(StoreError::DimensionMismatch { .. })
        ));
        assert!(matches!(coarse_topk(&store, &[1.0, 0.0], 0), Err(StoreError::InvalidK)));
        let empty = EmbeddingStore::from_rows("e", 2, Normalization::None, vec![]).unwrap();
        assert!(matches!(
            coarse_topk(&empty, &[1.0, 0.0], 1),
            Err(StoreError::EmptyStore)
        ));
    }

    #[test]
    fn write_then_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![("a".to_string(), vec![1.5, -2.0]), ("b".to_string(), vec![0.25, 8.0])];
        let store = EmbeddingStore::from_rows("cands", 2, Normalization::None, rows).unwrap();
        let p = store.write(dir.path(), "cands.json").unwrap();
        let back = ingest_embeddings(p).unwrap();
        assert_eq!(back.ids(), store.ids());
        assert_eq!(back.row(1), store.row(1));
    }
}
