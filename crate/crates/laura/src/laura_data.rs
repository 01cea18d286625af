//! Two-stage answer-utility training-data construction: language-debiased
//! candidate selection (stage 1), per-document utility thresholding
//! (stage 2), the stage-1-only ablation, the self-training baseline, and
//! listwise training-instance emission.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{render_chunk_text, CorpusIndex, DocumentChunk};
use crate::metrics::best_reference_recall;
use crate::pipeline::{NamedGenerator, Query, ScoredEntry};
use crate::services::{rerank, RankCandidate, Reranker};
use crate::{Error, Result};

/// Per-document answer utility across generators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityScore {
    pub chunk_id: String,
    pub per_generator: BTreeMap<String, f64>,
    pub mean: f64,
}

impl UtilityScore {
    fn new(chunk_id: String, per_generator: BTreeMap<String, f64>) -> Self {
        let mean = if per_generator.is_empty() {
            0.0
        } else {
            per_generator.values().sum::<f64>() / per_generator.len() as f64
        };
        Self { chunk_id, per_generator, mean }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancedCandidateSet {
    pub query_id: String,
    /// language -> up to 5 chunk ids in reranked order.
    pub by_language: BTreeMap<String, Vec<String>>,
    /// Language groups achieving the maximal utility (ties all kept).
    pub selected_languages: BTreeSet<String>,
    /// Union of the selected groups' lists, order-preserving.
    pub d_balanced: Vec<String>,
    /// Persisted group utilities so selection is auditable.
    pub group_utilities: BTreeMap<String, UtilityScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1Only,
    Full,
    SelfTraining,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query_id: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub theta: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub query_id: String,
    #[serde(rename = "query")]
    pub query_text: String,
    #[serde(rename = "pos")]
    pub positive: String,
    #[serde(rename = "neg")]
    pub negatives: Vec<String>,
}

/// How stage-1 utility is estimated: over each group's concatenated top-5
/// context, or per document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stage1Utility {
    #[default]
    GroupContext,
    PerDocument,
}

const PER_LANGUAGE_CAP: usize = 5;

fn score_context(
    generators: &[NamedGenerator],
    question: &str,
    context: &str,
    references: &[String],
) -> Result<BTreeMap<String, f64>> {
    let mut scores = BTreeMap::new();
    for generator in generators {
        let answer = generator.service.generate(question, context, &generator.id)?;
        scores.insert(generator.id.clone(), best_reference_recall(&answer, references));
    }
    Ok(scores)
}

/// Stage 1: partition the retrieved pool by language, rerank each group
/// independently, keep the top-5 per language, and select the group(s)
/// with maximal mean generation utility.
pub fn stage1_select(
    query: &Query,
    retrieved: &[ScoredEntry],
    reranker: &dyn Reranker,
    generators: &[NamedGenerator],
    index: &CorpusIndex,
    utility_mode: Stage1Utility,
) -> Result<BalancedCandidateSet> {
    if generators.is_empty() {
        return Err(Error::Precondition("stage1_select needs at least one generator".into()));
    }
    let mut groups: BTreeMap<String, Vec<&DocumentChunk>> = BTreeMap::new();
    for entry in retrieved {
        let chunk = index.get(&entry.chunk_id).ok_or_else(|| Error::Protocol {
            endpoint: "retriever".into(),
            reason: format!("unknown chunk id {}", entry.chunk_id),
        })?;
        groups.entry(chunk.language.clone()).or_default().push(chunk);
    }

    let mut by_language: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut group_utilities: BTreeMap<String, UtilityScore> = BTreeMap::new();
    for (language, chunks) in &groups {
        let candidates: Vec<RankCandidate> = chunks
            .iter()
            .map(|c| RankCandidate {
                chunk_id: c.chunk_id.clone(),
                rendered: render_chunk_text(c),
            })
            .collect();
        let mut entries = rerank(reranker, &query.text, &candidates)?;
        entries.truncate(PER_LANGUAGE_CAP);
        let top_ids: Vec<String> = entries.iter().map(|e| e.chunk_id.clone()).collect();

        let utility = match utility_mode {
            Stage1Utility::GroupContext => {
                let context = top_ids
                    .iter()
                    .map(|id| render_chunk_text(index.get(id).unwrap()))
                    .collect::<Vec<_>>()
                    .join("\n\n");
                score_context(generators, &query.text, &context, &query.reference_answers)
            }
            Stage1Utility::PerDocument => {
                // Mean over the group's documents of per-document utility.
                let mut acc: BTreeMap<String, f64> = BTreeMap::new();
                let mut result = Ok(());
                for id in &top_ids {
                    let context = render_chunk_text(index.get(id).unwrap());
                    match score_context(generators, &query.text, &context, &query.reference_answers)
                    {
                        Ok(scores) => {
                            for (generator, score) in scores {
                                *acc.entry(generator).or_insert(0.0) += score / top_ids.len() as f64;
                            }
                        }
                        Err(e) => {
                            result = Err(e);
                            break;
                        }
                    }
                }
                result.map(|()| acc)
            }
        };
        match utility {
            Ok(per_generator) => {
                group_utilities.insert(
                    language.clone(),
                    UtilityScore::new(format!("group:{language}"), per_generator),
                );
                by_language.insert(language.clone(), top_ids);
            }
            Err(e) => {
                log::warn!(
                    "query {}: stage-1 generation failed for group {language}: {e}; group excluded",
                    query.query_id
                );
            }
        }
    }

    if group_utilities.is_empty() {
        return Err(Error::NotApplicable(format!(
            "query {}: all language groups failed generation",
            query.query_id
        )));
    }

    let best = group_utilities.values().map(|u| u.mean).fold(f64::NEG_INFINITY, f64::max);
    let selected_languages: BTreeSet<String> = group_utilities
        .iter()
        .filter(|(_, u)| u.mean == best)
        .map(|(l, _)| l.clone())
        .collect();
    let d_balanced: Vec<String> = selected_languages
        .iter()
        .flat_map(|l| by_language[l].iter().cloned())
        .collect();

    Ok(BalancedCandidateSet {
        query_id: query.query_id.clone(),
        by_language,
        selected_languages,
        d_balanced,
        group_utilities,
    })
}

/// Stage 2: evaluate each candidate independently (context = that single
/// rendered chunk); positives are candidates with mean utility >= theta,
/// negatives are all retrieved candidates not selected as positives.
pub fn stage2_filter(
    query: &Query,
    d_balanced: &[String],
    retrieved: &[ScoredEntry],
    generators: &[NamedGenerator],
    theta: f64,
    index: &CorpusIndex,
) -> Result<(LabeledQuery, Vec<UtilityScore>)> {
    if d_balanced.is_empty() {
        return Err(Error::Precondition("stage2_filter needs a non-empty candidate set".into()));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Precondition(format!("theta must be in [0,1], got {theta}")));
    }
    let mut utilities = Vec::new();
    let mut positives = Vec::new();
    for chunk_id in d_balanced {
        let chunk = index.get(chunk_id).ok_or_else(|| Error::Protocol {
            endpoint: "corpus".into(),
            reason: format!("unknown chunk id {chunk_id}"),
        })?;
        let context = render_chunk_text(chunk);
        match score_context(generators, &query.text, &context, &query.reference_answers) {
            Ok(per_generator) => {
                let utility = UtilityScore::new(chunk_id.clone(), per_generator);
                if utility.mean >= theta {
                    positives.push(chunk_id.clone());
                }
                utilities.push(utility);
            }
            Err(e) => {
                log::warn!(
                    "query {}: stage-2 generation failed for chunk {chunk_id}: {e}; treated as negative",
                    query.query_id
                );
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::NotApplicable(format!(
            "query {}: no candidate reached theta {theta}",
            query.query_id
        )));
    }
    let positive_set: BTreeSet<&String> = positives.iter().collect();
    let negatives: Vec<String> = retrieved
        .iter()
        .map(|e| e.chunk_id.clone())
        .filter(|id| !positive_set.contains(id))
        .collect();
    Ok((
        LabeledQuery {
            query_id: query.query_id.clone(),
            positives,
            negatives,
            theta,
            stage: Stage::Full,
        },
        utilities,
    ))
}

/// Stage-1-only ablation: the balanced candidate set itself becomes the
/// positive set, with no utility thresholding.
pub fn stage1_only_label(
    query_id: &str,
    d_balanced: &[String],
    retrieved: &[ScoredEntry],
) -> LabeledQuery {
    let positive_set: BTreeSet<&String> = d_balanced.iter().collect();
    LabeledQuery {
        query_id: query_id.to_string(),
        positives: d_balanced.to_vec(),
        negatives: retrieved
            .iter()
            .map(|e| e.chunk_id.clone())
            .filter(|id| !positive_set.contains(id))
            .collect(),
        theta: 0.0,
        stage: Stage::Stage1Only,
    }
}

/// Self-training baseline: the reranker's own top-5 are positives, every
/// other retrieved candidate is a negative.
pub fn self_training_label(
    query_id: &str,
    reranked_top5: &[ScoredEntry],
    retrieved: &[ScoredEntry],
) -> Result<LabeledQuery> {
    if reranked_top5.is_empty() {
        return Err(Error::Precondition("self_training_label needs a non-empty reranked list".into()));
    }
    let positives: Vec<String> = reranked_top5.iter().map(|e| e.chunk_id.clone()).collect();
    let positive_set: BTreeSet<String> = positives.iter().cloned().collect();
    let negatives = retrieved
        .iter()
        .map(|e| e.chunk_id.clone())
        .filter(|id| !positive_set.contains(id))
        .collect();
    Ok(LabeledQuery {
        query_id: query_id.to_string(),
        positives,
        negatives,
        theta: 0.0,
        stage: Stage::SelfTraining,
    })
}

fn instance_rng(seed: u64, query_id: &str, positive_index: usize) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0]);
    hasher.update(query_id.as_bytes());
    hasher.update([0]);
    hasher.update((positive_index as u64).to_le_bytes());
    let digest = hasher.finalize();
    ChaCha20Rng::from_seed(digest.into())
}

/// One listwise instance per positive, with k negatives sampled uniformly
/// without replacement. Deterministic given (seed, query_id, positive
/// index); the negative list is sorted before sampling so input order does
/// not matter.
pub fn emit_training_instances(
    labeled: &LabeledQuery,
    query_text: &str,
    k: usize,
    seed: u64,
    index: &CorpusIndex,
) -> Result<Vec<TrainingInstance>> {
    if k == 0 {
        return Err(Error::Precondition("k must be >= 1".into()));
    }
    if labeled.negatives.len() < k {
        return Err(Error::NotApplicable(format!(
            "query {}: only {} negatives for k={k}",
            labeled.query_id,
            labeled.negatives.len()
        )));
    }
    let mut negatives = labeled.negatives.clone();
    negatives.sort();

    let render = |chunk_id: &str| -> Result<String> {
        index
            .get(chunk_id)
            .map(render_chunk_text)
            .ok_or_else(|| Error::Protocol {
                endpoint: "corpus".into(),
                reason: format!("unknown chunk id {chunk_id}"),
            })
    };

    let mut instances = Vec::with_capacity(labeled.positives.len());
    for (positive_index, positive_id) in labeled.positives.iter().enumerate() {
        let mut rng = instance_rng(seed, &labeled.query_id, positive_index);
        let picks = rand::seq::index::sample(&mut rng, negatives.len(), k);
        let mut sampled: Vec<String> = Vec::with_capacity(k);
        for i in picks.iter() {
            sampled.push(render(&negatives[i])?);
        }
        instances.push(TrainingInstance {
            query_id: labeled.query_id.clone(),
            query_text: query_text.to_string(),
            positive: render(positive_id)?,
            negatives: sampled,
        });
    }
    Ok(instances)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStatistics {
    pub queries: usize,
    pub positives: usize,
    pub avg_languages_per_query: f64,
}

/// Counts plus the mean over queries of distinct positive-document
/// languages.
pub fn dataset_statistics(labeled: &[LabeledQuery], index: &CorpusIndex) -> DatasetStatistics {
    let mut positives = 0;
    let mut language_sum = 0.0;
    for query in labeled {
        positives += query.positives.len();
        let distinct: BTreeSet<&str> = query
            .positives
            .iter()
            .filter_map(|id| index.get(id).map(|c| c.language.as_str()))
            .collect();
        language_sum += distinct.len() as f64;
    }
    DatasetStatistics {
        queries: labeled.len(),
        positives,
        avg_languages_per_query: if labeled.is_empty() {
            0.0
        } else {
            language_sum / labeled.len() as f64
        },
    }
}
