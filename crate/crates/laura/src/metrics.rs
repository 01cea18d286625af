//! Ranking and generation metrics: character 3-gram recall, Precision@k,
//! NDCG@k (binary relevance, log base 2).

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::pipeline::RankedList;

/// Multiset of character 3-grams, keyed by the 3-scalar string.
#[derive(Debug, Clone, Default)]
pub struct NgramMultiset {
    counts: HashMap<String, usize>,
    total: usize,
}

impl NgramMultiset {
    /// Extract all contiguous 3-grams of Unicode scalar values.
    pub fn extract(text: &str) -> Self {
        let chars: Vec<char> = text.chars().collect();
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut total = 0;
        if chars.len() >= 3 {
            for window in chars.windows(3) {
                let gram: String = window.iter().collect();
                *counts.entry(gram).or_insert(0) += 1;
                total += 1;
            }
        }
        Self { counts, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Size of the multiset intersection (per-gram min of counts).
    pub fn intersection_size(&self, other: &Self) -> usize {
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .counts
            .iter()
            .map(|(gram, &count)| count.min(*large.counts.get(gram).unwrap_or(&0)))
            .sum()
    }
}

/// |C_gen ∩ C_ref| / |C_ref| over character 3-gram multisets.
///
/// A reference shorter than 3 scalars has no grams; the score is defined
/// as 0 in that case (and logged), likewise for a too-short generation.
pub fn char_3gram_recall(generated: &str, reference: &str) -> f64 {
    let refs = NgramMultiset::extract(reference);
    if refs.total() == 0 {
        log::warn!("reference shorter than 3 scalars; recall defined as 0");
        return 0.0;
    }
    let gens = NgramMultiset::extract(generated);
    if gens.total() == 0 {
        return 0.0;
    }
    gens.intersection_size(&refs) as f64 / refs.total() as f64
}

/// Score a generated answer against multiple references: max over references.
pub fn best_reference_recall(generated: &str, references: &[String]) -> f64 {
    references
        .iter()
        .map(|r| char_3gram_recall(generated, r))
        .fold(0.0, f64::max)
}

/// Stable 3-gram counting and bucketing shared with the toy scorer's
/// hashed features.
pub struct NgramMultisetHasher;

impl NgramMultisetHasher {
    pub fn counts(text: &str) -> HashMap<String, usize> {
        let chars: Vec<char> = text.chars().collect();
        let mut counts = HashMap::new();
        if chars.len() >= 3 {
            for window in chars.windows(3) {
                *counts.entry(window.iter().collect::<String>()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// FNV-1a over the gram's UTF-8 bytes, reduced mod `dim`. Stable across
    /// platforms and runs.
    pub fn bucket(gram: &str, dim: usize) -> usize {
        let mut hash: u64 = 0xcbf29ce484222325;
        for byte in gram.as_bytes() {
            hash ^= *byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        (hash % dim as u64) as usize
    }
}

/// Binary relevance judgments for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelevanceJudgments {
    pub query_id: String,
    pub relevant_chunk_ids: BTreeSet<String>,
}

/// Proportion of relevant documents among the top k; positions beyond the
/// list length count as non-relevant.
pub fn precision_at_k(ranked: &RankedList, judgments: &RelevanceJudgments, k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    let hits = ranked
        .entries
        .iter()
        .take(k)
        .filter(|e| judgments.relevant_chunk_ids.contains(&e.chunk_id))
        .count();
    hits as f64 / k as f64
}

/// NDCG@k with binary gains (2^rel - 1 ∈ {0, 1}) and log2 discounts.
///
/// Returns `None` when no relevant document exists for the query (zero
/// ideal DCG); callers should skip such queries.
pub fn ndcg_at_k(ranked: &RankedList, judgments: &RelevanceJudgments, k: usize) -> Option<f64> {
    assert!(k >= 1, "k must be >= 1");
    let relevant_total = judgments.relevant_chunk_ids.len();
    if relevant_total == 0 {
        return None;
    }
    let dcg: f64 = ranked
        .entries
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, e)| judgments.relevant_chunk_ids.contains(&e.chunk_id))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    // Ideal: all relevant docs packed at the top, truncated at k.
    let idcg: f64 = (0..relevant_total.min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Some(dcg / idcg)
}
