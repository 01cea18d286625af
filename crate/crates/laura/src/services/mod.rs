//! Wire-protocol contracts for the three external model roles (retriever,
//! reranker, generator), deterministic mock implementations, HTTP clients,
//! and the mock HTTP server used for integration testing.
//!
//! Protocol: HTTP POST with JSON bodies at `/retrieve`, `/rerank`, and
//! `/generate`.

pub mod http;
pub mod mock;
pub mod server;

use serde::{Deserialize, Serialize};

use crate::pipeline::ScoredEntry;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub query: String,
    pub top_k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub chunk_ids: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankRequest {
    pub query: String,
    /// Rendered chunk strings ("{title}. {text}").
    pub documents: Vec<String>,
    /// Parallel to `documents`.
    pub chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankResponse {
    /// Parallel to the request's input order.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub question: String,
    pub context: String,
    pub generator_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub answer: String,
}

/// A document handed to the reranker: (chunk_id, rendered text).
#[derive(Debug, Clone)]
pub struct RankCandidate {
    pub chunk_id: String,
    pub rendered: String,
}

pub trait Retriever: Send + Sync {
    /// Top-k chunk ids with non-increasing scores.
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<ScoredEntry>>;
}

pub trait Reranker: Send + Sync {
    /// Raw relevance scores, parallel to the input candidates.
    fn score(&self, query: &str, candidates: &[RankCandidate]) -> Result<Vec<f64>>;
}

pub trait Generator: Send + Sync {
    fn generate(&self, question: &str, context: &str, generator_id: &str) -> Result<String>;
}

/// Rerank candidates with a scoring backend: output is a permutation of the
/// input ids sorted by score descending, ties broken by input order.
pub fn rerank(
    reranker: &dyn Reranker,
    query: &str,
    candidates: &[RankCandidate],
) -> Result<Vec<ScoredEntry>> {
    if candidates.is_empty() {
        return Err(Error::Precondition("rerank requires a non-empty candidate list".into()));
    }
    let scores = reranker.score(query, candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Protocol {
            endpoint: "reranker".into(),
            reason: format!(
                "score count {} does not match document count {}",
                scores.len(),
                candidates.len()
            ),
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(order
        .into_iter()
        .map(|i| ScoredEntry {
            chunk_id: candidates[i].chunk_id.clone(),
            score: scores[i],
        })
        .collect())
}
