//! Deterministic mock services: pure functions of their configuration and
//! the request, so repeated calls are byte-identical.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::{Generator, RankCandidate, Reranker, Retriever};
use crate::corpus::{render_chunk_text, CorpusIndex};
use crate::pipeline::ScoredEntry;
use crate::Result;

/// Scores by case-folded token-overlap count between the query and each
/// rendered chunk text. Ties broken by chunk id so output order is stable.
pub struct MockRetriever {
    /// (chunk_id, case-folded token set) per chunk, in chunk-id order.
    chunks: Vec<(String, BTreeSet<String>)>,
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

impl MockRetriever {
    pub fn new(index: &CorpusIndex) -> Self {
        let chunks = index
            .iter()
            .map(|chunk| (chunk.chunk_id.clone(), tokens(&render_chunk_text(chunk))))
            .collect();
        Self { chunks }
    }
}

impl Retriever for MockRetriever {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<ScoredEntry>> {
        let query_tokens = tokens(query);
        let mut scored: Vec<ScoredEntry> = self
            .chunks
            .iter()
            .map(|(chunk_id, chunk_tokens)| ScoredEntry {
                chunk_id: chunk_id.clone(),
                score: query_tokens.intersection(chunk_tokens).count() as f64,
            })
            .collect();
        // chunk-id order is already stable, so a stable sort by score
        // descending keeps ties deterministic.
        scored.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        scored.truncate(top_k);
        Ok(scored)
    }
}

/// Scores by a seeded hash of (query, chunk_id), or by an explicit
/// per-chunk score table when one is supplied.
pub struct MockReranker {
    pub seed: u64,
    pub score_table: Option<BTreeMap<String, f64>>,
}

impl MockReranker {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, score_table: None }
    }

    pub fn with_table(table: BTreeMap<String, f64>) -> Self {
        Self { seed: 0, score_table: Some(table) }
    }

    fn hash_score(&self, query: &str, chunk_id: &str) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([0]);
        hasher.update(query.as_bytes());
        hasher.update([0]);
        hasher.update(chunk_id.as_bytes());
        let digest = hasher.finalize();
        let raw = u64::from_le_bytes(digest[..8].try_into().unwrap());
        // Uniform in [0, 1).
        (raw >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl Reranker for MockReranker {
    fn score(&self, query: &str, candidates: &[RankCandidate]) -> Result<Vec<f64>> {
        Ok(candidates
            .iter()
            .map(|c| match &self.score_table {
                Some(table) => table.get(&c.chunk_id).copied().unwrap_or(0.0),
                None => self.hash_score(query, &c.chunk_id),
            })
            .collect())
    }
}

/// Answer lookup table keyed by (generator_id, question); unknown questions
/// yield "" with a warning. The echo mode instead returns a prefix of the
/// context, for tests that need context-dependent answers.
pub enum MockGenerator {
    Table(BTreeMap<String, BTreeMap<String, String>>),
    EchoPrefix(usize),
}

impl Generator for MockGenerator {
    fn generate(&self, question: &str, context: &str, generator_id: &str) -> Result<String> {
        match self {
            MockGenerator::Table(by_generator) => {
                let answer = by_generator
                    .get(generator_id)
                    .and_then(|m| m.get(question))
                    .cloned();
                Ok(answer.unwrap_or_else(|| {
                    log::warn!("mock generator {generator_id}: unknown question {question:?}");
                    String::new()
                }))
            }
            MockGenerator::EchoPrefix(n) => Ok(context.chars().take(*n).collect()),
        }
    }
}
