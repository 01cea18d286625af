//! The two experimental settings: vanilla document reranking (pooled
//! retrieve -> rerank -> generate) and oracle evidence estimation
//! (partition by language, rerank per group, take the best group score).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_chunk_text, CorpusIndex, DocumentChunk};
use crate::metrics::best_reference_recall;
use crate::services::{rerank, Generator, RankCandidate, Reranker, Retriever};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub chunk_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<ScoredEntry>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, entries: Vec<ScoredEntry>) -> Self {
        Self { query_id: query_id.into(), entries }
    }

    pub fn chunk_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.chunk_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub language: String,
    pub reference_answers: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generator_id: String,
    pub answer: String,
    /// Character 3-gram recall vs. the references (max over references).
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VanillaRunRecord {
    pub query_id: String,
    pub language: String,
    pub retrieved: RankedList,
    pub reranked: RankedList,
    pub context_language_counts: BTreeMap<String, usize>,
    pub mean_top5_score: f64,
    pub answers: BTreeMap<String, GenerationRecord>,
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleGroup {
    pub reranked_top5: RankedList,
    pub answers: BTreeMap<String, GenerationRecord>,
    /// Mean over generators of the group's answer score.
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleRunRecord {
    pub query_id: String,
    pub language: String,
    pub per_language: BTreeMap<String, OracleGroup>,
    pub best_score: f64,
    pub best_languages: BTreeSet<String>,
    #[serde(default)]
    pub flagged: bool,
}

/// A named generation service.
pub struct NamedGenerator<'a> {
    pub id: String,
    pub service: &'a dyn Generator,
}

pub struct PipelineConfig {
    pub retrieval_top_k: usize,
    pub rerank_top_k: usize,
    /// Template with `{question}` / `{context}` placeholders producing the
    /// question string sent to generators.
    pub prompt_template: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            retrieval_top_k: 50,
            rerank_top_k: 5,
            prompt_template: "{question}".into(),
        }
    }
}

fn render_prompt(template: &str, question: &str) -> String {
    template.replace("{question}", question)
}

fn resolve_chunks<'a>(
    index: &'a CorpusIndex,
    entries: &[ScoredEntry],
) -> Result<Vec<&'a DocumentChunk>> {
    entries
        .iter()
        .map(|e| {
            index.get(&e.chunk_id).ok_or_else(|| Error::Protocol {
                endpoint: "retriever".into(),
                reason: format!("unknown chunk id {}", e.chunk_id),
            })
        })
        .collect()
}

fn candidates_for(chunks: &[&DocumentChunk]) -> Vec<RankCandidate> {
    chunks
        .iter()
        .map(|c| RankCandidate {
            chunk_id: c.chunk_id.clone(),
            rendered: render_chunk_text(c),
        })
        .collect()
}

/// Concatenate rendered chunks in rank order, separated by a blank line.
pub fn build_context(index: &CorpusIndex, entries: &[ScoredEntry]) -> Result<String> {
    let chunks = resolve_chunks(index, entries)?;
    Ok(chunks
        .iter()
        .map(|c| render_chunk_text(c))
        .collect::<Vec<_>>()
        .join("\n\n"))
}

fn generate_all(
    generators: &[NamedGenerator],
    prompt: &str,
    context: &str,
    references: &[String],
) -> Result<BTreeMap<String, GenerationRecord>> {
    let mut answers = BTreeMap::new();
    for generator in generators {
        let answer = generator.service.generate(prompt, context, &generator.id)?;
        let score = best_reference_recall(&answer, references);
        answers.insert(
            generator.id.clone(),
            GenerationRecord {
                generator_id: generator.id.clone(),
                answer,
                score,
            },
        );
    }
    Ok(answers)
}

pub fn run_vanilla(
    query: &Query,
    retriever: &dyn Retriever,
    reranker: &dyn Reranker,
    generators: &[NamedGenerator],
    index: &CorpusIndex,
    config: &PipelineConfig,
) -> Result<VanillaRunRecord> {
    let retrieved_entries = retriever.retrieve(&query.text, config.retrieval_top_k)?;
    if retrieved_entries.is_empty() {
        log::warn!("query {}: empty retrieval", query.query_id);
        return Ok(VanillaRunRecord {
            query_id: query.query_id.clone(),
            language: query.language.clone(),
            retrieved: RankedList::new(&query.query_id, vec![]),
            reranked: RankedList::new(&query.query_id, vec![]),
            context_language_counts: BTreeMap::new(),
            mean_top5_score: 0.0,
            answers: BTreeMap::new(),
            flagged: true,
        });
    }
    let chunks = resolve_chunks(index, &retrieved_entries)?;
    let mut reranked_entries = rerank(reranker, &query.text, &candidates_for(&chunks))?;
    reranked_entries.truncate(config.rerank_top_k);

    let mut context_language_counts: BTreeMap<String, usize> = BTreeMap::new();
    for entry in &reranked_entries {
        let chunk = index.get(&entry.chunk_id).expect("reranked id came from the index");
        *context_language_counts.entry(chunk.language.clone()).or_insert(0) += 1;
    }
    let mean_top5_score = if reranked_entries.is_empty() {
        0.0
    } else {
        reranked_entries.iter().map(|e| e.score).sum::<f64>() / reranked_entries.len() as f64
    };

    let context = build_context(index, &reranked_entries)?;
    let prompt = render_prompt(&config.prompt_template, &query.text);
    let answers = generate_all(generators, &prompt, &context, &query.reference_answers)?;

    Ok(VanillaRunRecord {
        query_id: query.query_id.clone(),
        language: query.language.clone(),
        retrieved: RankedList::new(&query.query_id, retrieved_entries),
        reranked: RankedList::new(&query.query_id, reranked_entries),
        context_language_counts,
        mean_top5_score,
        answers,
        flagged: false,
    })
}

pub fn run_oracle(
    query: &Query,
    retriever: &dyn Retriever,
    reranker: &dyn Reranker,
    generators: &[NamedGenerator],
    index: &CorpusIndex,
    config: &PipelineConfig,
) -> Result<OracleRunRecord> {
    let retrieved_entries = retriever.retrieve(&query.text, config.retrieval_top_k)?;
    if retrieved_entries.is_empty() {
        log::warn!("query {}: empty retrieval", query.query_id);
        return Ok(OracleRunRecord {
            query_id: query.query_id.clone(),
            language: query.language.clone(),
            per_language: BTreeMap::new(),
            best_score: 0.0,
            best_languages: BTreeSet::new(),
            flagged: true,
        });
    }
    let chunks = resolve_chunks(index, &retrieved_entries)?;

    // Partition the candidate pool by chunk language, preserving retrieval
    // order within each group.
    let mut groups: BTreeMap<String, Vec<&DocumentChunk>> = BTreeMap::new();
    for chunk in &chunks {
        groups.entry(chunk.language.clone()).or_default().push(chunk);
    }

    let prompt = render_prompt(&config.prompt_template, &query.text);
    let mut per_language = BTreeMap::new();
    for (language, group_chunks) in groups {
        let mut entries = rerank(reranker, &query.text, &candidates_for(&group_chunks))?;
        entries.truncate(config.rerank_top_k);
        let context = build_context(index, &entries)?;
        let answers = match generate_all(generators, &prompt, &context, &query.reference_answers) {
            Ok(answers) => answers,
            Err(e) => {
                log::warn!(
                    "query {}: generation failed for language group {language}: {e}; group excluded",
                    query.query_id
                );
                continue;
            }
        };
        let score = if answers.is_empty() {
            0.0
        } else {
            answers.values().map(|a| a.score).sum::<f64>() / answers.len() as f64
        };
        per_language.insert(
            language,
            OracleGroup {
                reranked_top5: RankedList::new(&query.query_id, entries),
                answers,
                score,
            },
        );
    }

    let best_score = per_language.values().map(|g| g.score).fold(f64::NEG_INFINITY, f64::max);
    let (best_score, best_languages) = if per_language.is_empty() {
        (0.0, BTreeSet::new())
    } else {
        let ties = per_language
            .iter()
            .filter(|(_, g)| g.score == best_score)
            .map(|(l, _)| l.clone())
            .collect();
        (best_score, ties)
    };

    let flagged = best_languages.is_empty();
    Ok(OracleRunRecord {
        query_id: query.query_id.clone(),
        language: query.language.clone(),
        per_language,
        best_score,
        best_languages,
        flagged,
    })
}

/// Per-run bookkeeping emitted alongside the record JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub toolkit_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seed: u64,
    pub total_queries: usize,
    pub completed: usize,
    pub resumed: usize,
    pub failed: Vec<FailedQuery>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedQuery {
    pub query_id: String,
    pub reason: String,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Query ids already present in a checkpoint JSONL (for resume).
pub fn completed_query_ids(path: &Path) -> Result<BTreeSet<String>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    #[derive(Deserialize)]
    struct IdOnly {
        query_id: String,
    }
    let records: Vec<IdOnly> = crate::corpus::read_jsonl(path)?;
    Ok(records.into_iter().map(|r| r.query_id).collect())
}

/// Drive one of the per-query run functions over a query list with a
/// bounded worker pool, appending records to `out_path` in input order and
/// skipping query ids already present there.
pub fn run_queries<R, F>(
    queries: &[Query],
    out_path: &Path,
    manifest_path: &Path,
    config_hash: &str,
    seed: u64,
    parallelism: usize,
    run_one: F,
) -> Result<RunManifest>
where
    R: Serialize + Send,
    F: Fn(&Query) -> Result<R> + Sync,
{
    let started = now_unix();
    let done = completed_query_ids(out_path)?;
    let pending: Vec<&Query> = queries.iter().filter(|q| !done.contains(&q.query_id)).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<(String, Result<R>)> = pool.install(|| {
        use rayon::prelude::*;
        pending
            .par_iter()
            .map(|q| (q.query_id.clone(), run_one(q)))
            .collect()
    });

    // Single writer, input order.
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_path)
        .map_err(|e| Error::io(out_path.display().to_string(), e))?;
    let mut failed = Vec::new();
    let mut completed = 0;
    for (query_id, result) in results {
        match result {
            Ok(record) => {
                let line = serde_json::to_string(&record).expect("serializable record");
                writeln!(file, "{line}").map_err(|e| Error::io(out_path.display().to_string(), e))?;
                completed += 1;
            }
            Err(e) => {
                log::warn!("query {query_id} failed: {e}");
                failed.push(FailedQuery { query_id, reason: e.to_string() });
            }
        }
    }

    let manifest = RunManifest {
        config_hash: config_hash.to_string(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now_unix(),
        seed,
        total_queries: queries.len(),
        completed: completed + done.len(),
        resumed: done.len(),
        failed,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    std::fs::write(manifest_path, json)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}
