//! Coarse-then-fine multimodal retrieval.
//!
//! A query is matched against a candidate store by exact cosine similarity
//! ([`embedstore`]); the top-k survivors are rescored one pair at a time by a
//! generative model ([`finescorer`]); candidates that share the best score are
//! separated by the entropy of a True/False confidence answer ([`tiebreak`]).
//! [`pipeline`] wires the stages together and [`eval`] measures them.
//!
//! [`reinjection`] is a standalone numeric kernel for feed-forward visual
//! re-injection, verified against fixtures.

pub mod content;
pub mod dataset;
pub mod embedstore;
pub mod eval;
pub mod finescorer;
pub mod http;
pub mod mock;
pub mod pipeline;
pub mod reinjection;
pub mod synthetic;
pub mod tiebreak;
pub mod util;

pub use content::{MultimodalContent, Part};
pub use embedstore::{coarse_topk, cosine_similarity, ingest_embeddings, CandidatePool, EmbeddingStore};
pub use pipeline::{retrieve, retrieve_batch, Corpus, PipelineConfig, Query, RankedResult};
