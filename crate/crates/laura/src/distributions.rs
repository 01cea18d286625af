//! Language-distribution analytics: per-query-language distributions for
//! the vanilla and oracle settings, KL/JS divergence and entropy (log base
//! 2), and the heatmap matrices emitted as data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::pipeline::{OracleRunRecord, VanillaRunRecord};
use crate::{Error, Result};

const EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageDistribution {
    pub query_language: String,
    pub probs: BTreeMap<String, f64>,
}

impl LanguageDistribution {
    fn from_weighted_queries(
        query_language: &str,
        per_query: Vec<BTreeMap<String, f64>>,
    ) -> Self {
        let n = per_query.len() as f64;
        let mut probs: BTreeMap<String, f64> = BTreeMap::new();
        for weights in per_query {
            for (language, weight) in weights {
                *probs.entry(language).or_insert(0.0) += weight / n;
            }
        }
        Self { query_language: query_language.to_string(), probs }
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }
}

/// Per-query proportion of each language within the final top-k, averaged
/// uniformly over all queries of one query language.
pub fn vanilla_distribution(
    records: &[VanillaRunRecord],
    query_language: &str,
) -> Result<LanguageDistribution> {
    let per_query: Vec<BTreeMap<String, f64>> = records
        .iter()
        .filter(|r| r.language == query_language && !r.reranked.entries.is_empty())
        .map(|r| {
            let total: usize = r.context_language_counts.values().sum();
            r.context_language_counts
                .iter()
                .map(|(l, &c)| (l.clone(), c as f64 / total as f64))
                .collect()
        })
        .collect();
    if per_query.is_empty() {
        return Err(Error::NotApplicable(format!(
            "no evaluable vanilla records for query language {query_language}"
        )));
    }
    Ok(LanguageDistribution::from_weighted_queries(query_language, per_query))
}

/// Per-query best-language weights (1 on a unique best, 1/ties on tied
/// bests), averaged uniformly over all queries of one query language.
pub fn oracle_distribution(
    records: &[OracleRunRecord],
    query_language: &str,
) -> Result<LanguageDistribution> {
    let per_query: Vec<BTreeMap<String, f64>> = records
        .iter()
        .filter(|r| r.language == query_language && !r.best_languages.is_empty())
        .map(|r| {
            let weight = 1.0 / r.best_languages.len() as f64;
            r.best_languages.iter().map(|l| (l.clone(), weight)).collect()
        })
        .collect();
    if per_query.is_empty() {
        return Err(Error::NotApplicable(format!(
            "no evaluable oracle records for query language {query_language}"
        )));
    }
    Ok(LanguageDistribution::from_weighted_queries(query_language, per_query))
}

fn aligned(
    p: &LanguageDistribution,
    q: &LanguageDistribution,
) -> (Vec<f64>, Vec<f64>) {
    let mut keys: Vec<&String> = p.probs.keys().chain(q.probs.keys()).collect();
    keys.sort();
    keys.dedup();
    let pv = keys.iter().map(|k| *p.probs.get(*k).unwrap_or(&0.0)).collect();
    let qv = keys.iter().map(|k| *q.probs.get(*k).unwrap_or(&0.0)).collect();
    (pv, qv)
}

/// KL(p || q) in bits, with zero-support q entries smoothed by epsilon and
/// renormalized.
pub fn kl_divergence(p: &LanguageDistribution, q: &LanguageDistribution) -> f64 {
    let (pv, qv) = aligned(p, q);
    kl_vec(&pv, &qv)
}

fn kl_vec(pv: &[f64], qv: &[f64]) -> f64 {
    // Smooth q where p has support that q lacks, then renormalize q.
    let needs_smoothing = pv.iter().zip(qv).any(|(&p, &q)| p > 0.0 && q == 0.0);
    let qs: Vec<f64> = if needs_smoothing {
        let smoothed: Vec<f64> = pv
            .iter()
            .zip(qv)
            .map(|(&p, &q)| if p > 0.0 && q == 0.0 { EPSILON } else { q })
            .collect();
        let total: f64 = smoothed.iter().sum();
        smoothed.into_iter().map(|v| v / total).collect()
    } else {
        qv.to_vec()
    };
    pv.iter()
        .zip(&qs)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q).log2())
        .sum()
}

/// Jensen-Shannon divergence in bits: ½KL(p‖m) + ½KL(q‖m), m = (p+q)/2.
/// Bounded by 1 in base 2.
pub fn js_divergence(p: &LanguageDistribution, q: &LanguageDistribution) -> f64 {
    let (pv, qv) = aligned(p, q);
    let m: Vec<f64> = pv.iter().zip(&qv).map(|(&a, &b)| (a + b) / 2.0).collect();
    0.5 * kl_vec(&pv, &m) + 0.5 * kl_vec(&qv, &m)
}

/// Shannon entropy in bits with the 0·log 0 = 0 convention.
pub fn entropy(p: &LanguageDistribution) -> f64 {
    p.probs
        .values()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.log2())
        .sum()
}

/// Columns = query languages, rows = doc languages; each column sums to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionMatrix {
    pub query_languages: Vec<String>,
    pub doc_languages: Vec<String>,
    /// values[row][col] = P(doc language row | query language col).
    pub values: Vec<Vec<f64>>,
}

impl DistributionMatrix {
    pub fn from_distributions(
        distributions: &[LanguageDistribution],
        language_set: &[String],
    ) -> Self {
        let query_languages: Vec<String> =
            distributions.iter().map(|d| d.query_language.clone()).collect();
        let values = language_set
            .iter()
            .map(|doc_lang| {
                distributions
                    .iter()
                    .map(|d| *d.probs.get(doc_lang).unwrap_or(&0.0))
                    .collect()
            })
            .collect();
        Self {
            query_languages,
            doc_languages: language_set.to_vec(),
            values,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("doc_language");
        for ql in &self.query_languages {
            out.push('\t');
            out.push_str(ql);
        }
        out.push('\n');
        for (row, doc_lang) in self.doc_languages.iter().enumerate() {
            out.push_str(doc_lang);
            for value in &self.values[row] {
                out.push_str(&format!("\t{value:.10}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub query_language: String,
    pub js: f64,
    pub kl: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionReport {
    pub matrix_vanilla: DistributionMatrix,
    pub matrix_oracle: DistributionMatrix,
    pub per_query_language: Vec<DivergenceRow>,
    /// Unweighted means over query languages: (JS, KL, entropy).
    pub means: (f64, f64, f64),
}

/// Direction of the reported KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// KL(vanilla || oracle).
    #[default]
    VanillaToOracle,
    OracleToVanilla,
}

pub fn distribution_report(
    vanilla_records: &[VanillaRunRecord],
    oracle_records: &[OracleRunRecord],
    language_set: &[String],
    kl_direction: KlDirection,
) -> Result<DistributionReport> {
    let mut vanilla_dists = Vec::new();
    let mut oracle_dists = Vec::new();
    let mut rows = Vec::new();
    for query_language in language_set {
        let vanilla = vanilla_distribution(vanilla_records, query_language);
        let oracle = oracle_distribution(oracle_records, query_language);
        let (vanilla, oracle) = match (vanilla, oracle) {
            (Ok(v), Ok(o)) => (v, o),
            _ => {
                log::warn!("query language {query_language} missing on one side; skipped");
                continue;
            }
        };
        let kl = match kl_direction {
            KlDirection::VanillaToOracle => kl_divergence(&vanilla, &oracle),
            KlDirection::OracleToVanilla => kl_divergence(&oracle, &vanilla),
        };
        rows.push(DivergenceRow {
            query_language: query_language.clone(),
            js: js_divergence(&vanilla, &oracle),
            kl,
            entropy: entropy(&vanilla),
        });
        vanilla_dists.push(vanilla);
        oracle_dists.push(oracle);
    }
    if rows.is_empty() {
        return Err(Error::NotApplicable("no query language evaluable on both sides".into()));
    }
    let n = rows.len() as f64;
    let means = (
        rows.iter().map(|r| r.js).sum::<f64>() / n,
        rows.iter().map(|r| r.kl).sum::<f64>() / n,
        rows.iter().map(|r| r.entropy).sum::<f64>() / n,
    );
    Ok(DistributionReport {
        matrix_vanilla: DistributionMatrix::from_distributions(&vanilla_dists, language_set),
        matrix_oracle: DistributionMatrix::from_distributions(&oracle_dists, language_set),
        per_query_language: rows,
        means,
    })
}
