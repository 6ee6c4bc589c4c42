//! Retrieval datasets: a JSON manifest naming a candidate store, optional
//! candidate payloads, and query records with their gold candidate.
//!
//! ```json
//! {
//!   "name": "flickr30k-t2i",
//!   "direction": "query_text_to_image",
//!   "store": "images.json",
//!   "query_store": "captions.json",
//!   "candidate_contents": "images.jsonl",
//!   "queries_file": "queries.jsonl"
//! }
//! ```
//!
//! Paths are relative to the manifest. Each query record carries `query_id`,
//! `gold_candidate_id`, optional `text` / `image`, and exactly one embedding
//! reference: an inline `embedding`, an `embedding_index` row of the query
//! store, or an `embedding_id` looked up in the query store.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{ContentError, MultimodalContent, Part};
use crate::embedstore::{ingest_embeddings, EmbeddingStore, Normalization, StoreError};
use crate::pipeline::{Corpus, Query};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {}{}: {reason}", path.display(), line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        reason: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("gold candidate {gold:?} of query {query_id:?} is not in the store")]
    MissingGoldCandidate { query_id: String, gold: String },
    #[error("duplicate query id {0:?}")]
    DuplicateQueryId(String),
    #[error("query {query_id:?}: {reason}")]
    BadEmbedding { query_id: String, reason: String },
    #[error("query {query_id:?}: {source}")]
    Content {
        query_id: String,
        #[source]
        source: ContentError,
    },
    #[error("manifest must list queries inline or name a queries_file")]
    NoQueries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    QueryImageToText,
    QueryTextToImage,
    #[default]
    Generic,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_id: Option<String>,
    pub gold_candidate_id: String,
}

/// A candidate payload line: `{"id": ..., "text": ...}` and/or `"image"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default)]
    pub direction: Direction,
    pub store: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_store: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_contents: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub queries: Vec<QueryRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries_file: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RetrievalDataset {
    pub name: String,
    pub direction: Direction,
    pub queries: Vec<Query>,
    /// `gold[i]` is the target of `queries[i]`.
    pub gold: Vec<String>,
    pub corpus: Corpus,
}

impl RetrievalDataset {
    /// Checks the dataset invariants: unique query ids, every gold id in the
    /// store, query dims matching the store.
    pub fn new(
        name: impl Into<String>,
        direction: Direction,
        queries: Vec<Query>,
        gold: Vec<String>,
        corpus: Corpus,
    ) -> Result<Self, DatasetError> {
        assert_eq!(queries.len(), gold.len(), "one gold id per query");
        let mut seen = HashSet::new();
        for (q, g) in queries.iter().zip(&gold) {
            if !seen.insert(q.id.as_str()) {
                return Err(DatasetError::DuplicateQueryId(q.id.clone()));
            }
            if corpus.store.ordinal(g).is_none() {
                return Err(DatasetError::MissingGoldCandidate {
                    query_id: q.id.clone(),
                    gold: g.clone(),
                });
            }
            if q.embedding.len() != corpus.store.dim() {
                return Err(DatasetError::BadEmbedding {
                    query_id: q.id.clone(),
                    reason: format!(
                        "dimension {} does not match store dimension {}",
                        q.embedding.len(),
                        corpus.store.dim()
                    ),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            direction,
            queries,
            gold,
            corpus,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn gold_map(&self) -> HashMap<String, String> {
        self.queries
            .iter()
            .zip(&self.gold)
            .map(|(q, g)| (q.id.clone(), g.clone()))
            .collect()
    }

    /// Writes stores, payloads and manifest under `dir`; returns the
    /// manifest path. Query embeddings go to a query store referenced by id.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf, DatasetError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DatasetError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let store_manifest = "candidates.json";
        self.corpus.store.write(dir, store_manifest).map_err(io(dir))?;

        let rows = self
            .queries
            .iter()
            .map(|q| (q.id.clone(), q.embedding.clone()))
            .collect();
        let qstore = EmbeddingStore::from_rows("queries", self.corpus.store.dim(), Normalization::None, rows)?;
        let query_manifest = "queries.json";
        qstore.write(dir, query_manifest).map_err(io(dir))?;

        let mut contents_path = None;
        if !self.corpus.contents.is_empty() {
            let mut ids: Vec<&String> = self.corpus.contents.keys().collect();
            ids.sort();
            let mut out = String::new();
            for id in ids {
                let rec = content_record(id, &self.corpus.contents[id]);
                out.push_str(&serde_json::to_string(&rec).expect("serializable"));
                out.push('\n');
            }
            let p = dir.join("candidate_contents.jsonl");
            fs::write(&p, out).map_err(io(&p))?;
            contents_path = Some(PathBuf::from("candidate_contents.jsonl"));
        }

        let mut lines = String::new();
        for (q, g) in self.queries.iter().zip(&self.gold) {
            let (text, image) = split_content(&q.content);
            let rec = QueryRecord {
                query_id: q.id.clone(),
                text,
                image,
                embedding_id: Some(q.id.clone()),
                gold_candidate_id: g.clone(),
                ..QueryRecord::default()
            };
            lines.push_str(&serde_json::to_string(&rec).expect("serializable"));
            lines.push('\n');
        }
        let qfile = dir.join("queries.jsonl");
        fs::write(&qfile, lines).map_err(io(&qfile))?;

        let manifest = DatasetManifest {
            name: self.name.clone(),
            direction: self.direction,
            store: store_manifest.into(),
            query_store: Some(query_manifest.into()),
            candidate_contents: contents_path,
            queries: vec![],
            queries_file: Some("queries.jsonl".into()),
        };
        let path = dir.join("dataset.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(io(&path))?;
        Ok(path)
    }
}

fn split_content(c: &MultimodalContent) -> (Option<String>, Option<String>) {
    let mut text = None;
    let mut image = None;
    for p in c.parts() {
        match p {
            Part::Text(t) if text.is_none() => text = Some(t.clone()),
            Part::ImageRef(r) if image.is_none() => image = Some(r.clone()),
            _ => {}
        }
    }
    (text, image)
}

fn content_record(id: &str, c: &MultimodalContent) -> ContentRecord {
    let (text, image) = split_content(c);
    ContentRecord {
        id: id.to_owned(),
        text,
        image,
    }
}

/// Image first, then text; a record with neither is presented by its id.
fn content_from(id: &str, text: Option<&str>, image: Option<&str>) -> Result<MultimodalContent, ContentError> {
    let mut parts = Vec::new();
    if let Some(i) = image {
        parts.push(Part::ImageRef(i.to_owned()));
    }
    if let Some(t) = text {
        parts.push(Part::Text(t.to_owned()));
    }
    if parts.is_empty() {
        parts.push(Part::Text(id.to_owned()));
    }
    MultimodalContent::new(parts)
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: Some(i + 1),
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn resolve_embedding(rec: &QueryRecord, query_store: Option<&EmbeddingStore>) -> Result<Vec<f32>, DatasetError> {
    let bad = |reason: String| DatasetError::BadEmbedding {
        query_id: rec.query_id.clone(),
        reason,
    };
    let refs = [
        rec.embedding.is_some(),
        rec.embedding_index.is_some(),
        rec.embedding_id.is_some(),
    ];
    match refs.iter().filter(|r| **r).count() {
        0 => return Err(bad("no embedding reference".into())),
        1 => {}
        _ => return Err(bad("more than one embedding reference".into())),
    }
    if let Some(v) = &rec.embedding {
        return Ok(v.clone());
    }
    let store = query_store.ok_or_else(|| bad("embedding reference needs a query_store".into()))?;
    if let Some(i) = rec.embedding_index {
        if i >= store.len() {
            return Err(bad(format!("embedding_index {i} out of range ({} rows)", store.len())));
        }
        return Ok(store.row(i).to_vec());
    }
    let id = rec.embedding_id.as_deref().expect("counted above");
    store
        .get(id)
        .map(<[f32]>::to_vec)
        .ok_or_else(|| bad(format!("embedding_id {id:?} not in query store")))
}

/// Loads a dataset manifest and everything it references.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<RetrievalDataset, DatasetError> {
    let manifest_path = manifest_path.as_ref();
    let raw = read_to_string(manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&raw).map_err(|e| DatasetError::Parse {
        path: manifest_path.to_path_buf(),
        line: None,
        reason: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let store = Arc::new(ingest_embeddings(base.join(&manifest.store))?);
    let query_store = manifest
        .query_store
        .as_ref()
        .map(|p| ingest_embeddings(base.join(p)))
        .transpose()?;

    let contents = match &manifest.candidate_contents {
        Some(p) => load_contents(base.join(p))?,
        None => HashMap::new(),
    };

    let mut records = manifest.queries;
    if let Some(p) = &manifest.queries_file {
        records.extend(read_jsonl::<QueryRecord>(&base.join(p))?);
    } else if records.is_empty() {
        return Err(DatasetError::NoQueries);
    }

    let mut queries = Vec::with_capacity(records.len());
    let mut gold = Vec::with_capacity(records.len());
    for rec in records {
        let content = content_from(&rec.query_id, rec.text.as_deref(), rec.image.as_deref()).map_err(|source| {
            DatasetError::Content {
                query_id: rec.query_id.clone(),
                source,
            }
        })?;
        let embedding = resolve_embedding(&rec, query_store.as_ref())?;
        gold.push(rec.gold_candidate_id);
        queries.push(Query {
            id: rec.query_id,
            content,
            embedding,
        });
    }
    RetrievalDataset::new(
        manifest.name,
        manifest.direction,
        queries,
        gold,
        Corpus::with_contents(store, contents),
    )
}

/// Reads candidate payload lines (see [`ContentRecord`]).
pub fn load_contents(path: impl AsRef<Path>) -> Result<HashMap<String, MultimodalContent>, DatasetError> {
    let mut contents = HashMap::new();
    for rec in read_jsonl::<ContentRecord>(path.as_ref())? {
        let c = content_from(&rec.id, rec.text.as_deref(), rec.image.as_deref()).map_err(|source| {
            DatasetError::Content {
                query_id: rec.id.clone(),
                source,
            }
        })?;
        contents.insert(rec.id, c);
    }
    Ok(contents)
}

/// A query line for ad-hoc retrieval: like [`QueryRecord`] but with an
/// inline embedding and no gold label (a `gold_candidate_id` is ignored).
#[derive(Debug, Clone, Deserialize)]
struct AdHocQuery {
    query_id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    image: Option<String>,
    embedding: Vec<f32>,
}

/// Reads JSONL query lines `{query_id, text?, image?, embedding}`.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in read_jsonl::<AdHocQuery>(path.as_ref())? {
        if !seen.insert(rec.query_id.clone()) {
            return Err(DatasetError::DuplicateQueryId(rec.query_id));
        }
        let content = content_from(&rec.query_id, rec.text.as_deref(), rec.image.as_deref()).map_err(|source| {
            DatasetError::Content {
                query_id: rec.query_id.clone(),
                source,
            }
        })?;
        out.push(Query {
            id: rec.query_id,
            content,
            embedding: rec.embedding,
        });
    }
    Ok(out)
}

/// One line of a caption-retrieval annotation file: an image with one or
/// more captions (`caption` or `captions`), and an optional `id`.
#[derive(Debug, Clone, Deserialize)]
struct CaptionLine {
    #[serde(default)]
    id: Option<String>,
    image: String,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    captions: Vec<String>,
}

/// Id conventions used by the converter: images are keyed by their `id`
/// (or the image file stem), captions by `<image id>#<n>`.
pub fn image_key(id: Option<&str>, image: &str) -> String {
    id.map(str::to_owned).unwrap_or_else(|| {
        Path::new(image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| image.to_owned())
    })
}

pub fn caption_key(image_key: &str, n: usize) -> String {
    format!("{image_key}#{n}")
}

/// Converts caption-retrieval JSONL (one image per line) into a dataset
/// manifest with one query per line. Text-to-image queries use the first
/// caption and target the image; image-to-text queries target the first
/// caption. Store paths are written as given, relative to the output.
pub fn convert_caption_jsonl(
    input: &Path,
    direction: Direction,
    name: &str,
    candidate_store: &Path,
    query_store: &Path,
    out_dir: &Path,
) -> Result<PathBuf, DatasetError> {
    let lines: Vec<CaptionLine> = read_jsonl(input)?;
    let mut records = String::new();
    let mut contents = String::new();
    for (i, line) in lines.iter().enumerate() {
        let key = image_key(line.id.as_deref(), &line.image);
        let caption = line
            .caption
            .clone()
            .or_else(|| line.captions.first().cloned())
            .ok_or_else(|| DatasetError::Parse {
                path: input.to_path_buf(),
                line: Some(i + 1),
                reason: "no caption".into(),
            })?;
        let cap_key = caption_key(&key, 0);
        let (rec, cand) = match direction {
            Direction::QueryTextToImage => (
                QueryRecord {
                    query_id: cap_key.clone(),
                    text: Some(caption),
                    embedding_id: Some(cap_key),
                    gold_candidate_id: key.clone(),
                    ..QueryRecord::default()
                },
                ContentRecord {
                    id: key,
                    text: None,
                    image: Some(line.image.clone()),
                },
            ),
            Direction::QueryImageToText | Direction::Generic => (
                QueryRecord {
                    query_id: key.clone(),
                    image: Some(line.image.clone()),
                    embedding_id: Some(key),
                    gold_candidate_id: cap_key.clone(),
                    ..QueryRecord::default()
                },
                ContentRecord {
                    id: cap_key,
                    text: Some(caption),
                    image: None,
                },
            ),
        };
        records.push_str(&serde_json::to_string(&rec).expect("serializable"));
        records.push('\n');
        contents.push_str(&serde_json::to_string(&cand).expect("serializable"));
        contents.push('\n');
    }
    fs::create_dir_all(out_dir).map_err(|source| DatasetError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let write = |file: &str, body: &str| {
        let p = out_dir.join(file);
        fs::write(&p, body).map_err(|source| DatasetError::Io { path: p, source })
    };
    write("queries.jsonl", &records)?;
    write("candidate_contents.jsonl", &contents)?;
    let manifest = DatasetManifest {
        name: name.to_owned(),
        direction,
        store: candidate_store.to_path_buf(),
        query_store: Some(query_store.to_path_buf()),
        candidate_contents: Some("candidate_contents.jsonl".into()),
        queries: vec![],
        queries_file: Some("queries.jsonl".into()),
    };
    let path = out_dir.join("dataset.json");
    write(
        "dataset.json",
        &serde_json::to_string_pretty(&manifest).expect("serializable"),
    )?;
    Ok(path)
}
