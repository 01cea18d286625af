//! Listwise softmax cross-entropy objective with analytic gradients,
//! finite-difference verification, and a toy linear-scorer trainer.
//!
//! L = -s(q, d_pos) + log sum_d exp(s(q, d)), computed with the
//! log-sum-exp stabilization.

use serde::{Deserialize, Serialize};

use crate::laura_data::TrainingInstance;
use crate::metrics::NgramMultisetHasher;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredList {
    pub scores: Vec<f64>,
    pub positive_index: usize,
}

impl ScoredList {
    pub fn new(scores: Vec<f64>, positive_index: usize) -> Result<Self> {
        if positive_index >= scores.len() {
            return Err(Error::Precondition(format!(
                "positive_index {positive_index} out of range for {} scores",
                scores.len()
            )));
        }
        Ok(Self { scores, positive_index })
    }
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

pub fn listwise_loss(list: &ScoredList) -> f64 {
    -list.scores[list.positive_index] + log_sum_exp(&list.scores)
}

/// dL/ds_i = softmax(s)_i - [i == positive_index]; entries sum to zero.
pub fn listwise_loss_gradient(list: &ScoredList) -> Vec<f64> {
    let max = list.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = list.scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter()
        .enumerate()
        .map(|(i, e)| e / total - if i == list.positive_index { 1.0 } else { 0.0 })
        .collect()
}

/// Central finite-difference gradient, the independent check for the
/// analytic one.
pub fn finite_difference_gradient(list: &ScoredList, h: f64) -> Vec<f64> {
    (0..list.scores.len())
        .map(|i| {
            let mut plus = list.clone();
            plus.scores[i] += h;
            let mut minus = list.clone();
            minus.scores[i] -= h;
            (listwise_loss(&plus) - listwise_loss(&minus)) / (2.0 * h)
        })
        .collect()
}

pub const FEATURE_DIM: usize = 256;

/// Hashed character-3-gram overlap features between a query and a chunk
/// rendering: bucket b accumulates the multiset-overlap count of grams
/// hashing to b.
pub fn overlap_features(query: &str, chunk: &str) -> Vec<f64> {
    let mut features = vec![0.0; FEATURE_DIM];
    let query_grams = NgramMultisetHasher::counts(query);
    let chunk_grams = NgramMultisetHasher::counts(chunk);
    for (gram, q_count) in &query_grams {
        if let Some(c_count) = chunk_grams.get(gram) {
            let bucket = NgramMultisetHasher::bucket(gram, FEATURE_DIM);
            features[bucket] += (*q_count).min(*c_count) as f64;
        }
    }
    features
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyScorer {
    pub weights: Vec<f64>,
}

impl ToyScorer {
    pub fn score(&self, query: &str, chunk: &str) -> f64 {
        overlap_features(query, chunk)
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub scorer: ToyScorer,
    pub loss_curve: Vec<f64>,
}

/// Plain gradient descent on the mean listwise loss with the hashed
/// overlap features. Deterministic: the seed only sets the (tiny) initial
/// weight scale, the data order is the input order.
pub fn train_toy_scorer(
    instances: &[TrainingInstance],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainReport> {
    if instances.is_empty() {
        return Err(Error::Precondition("train_toy_scorer needs at least one instance".into()));
    }
    // Precompute features: positive first, then negatives.
    let feature_lists: Vec<Vec<Vec<f64>>> = instances
        .iter()
        .map(|instance| {
            std::iter::once(&instance.positive)
                .chain(&instance.negatives)
                .map(|doc| overlap_features(&instance.query_text, doc))
                .collect()
        })
        .collect();

    // Deterministic small init from the seed.
    let mut weights = vec![0.0f64; FEATURE_DIM];
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    for w in weights.iter_mut() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        *w = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 1e-3;
    }

    let n = instances.len() as f64;
    let mut loss_curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut grad = vec![0.0f64; FEATURE_DIM];
        let mut total_loss = 0.0;
        for features in &feature_lists {
            let scores: Vec<f64> = features
                .iter()
                .map(|x| x.iter().zip(&weights).map(|(a, b)| a * b).sum())
                .collect();
            let list = ScoredList { scores, positive_index: 0 };
            let loss = listwise_loss(&list);
            if !loss.is_finite() {
                return Err(Error::Domain(format!("non-finite loss at epoch {epoch}")));
            }
            total_loss += loss;
            let score_grad = listwise_loss_gradient(&list);
            for (g, x) in score_grad.iter().zip(features) {
                for (slot, xi) in grad.iter_mut().zip(x) {
                    *slot += g * xi / n;
                }
            }
        }
        loss_curve.push(total_loss / n);
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= learning_rate * g;
        }
    }

    Ok(TrainReport { scorer: ToyScorer { weights }, loss_curve })
}

/// Fraction of instances on which the scorer ranks the positive first.
pub fn positive_first_rate(scorer: &ToyScorer, instances: &[TrainingInstance]) -> f64 {
    let hits = instances
        .iter()
        .filter(|instance| {
            let positive = scorer.score(&instance.query_text, &instance.positive);
            instance
                .negatives
                .iter()
                .all(|negative| positive > scorer.score(&instance.query_text, negative))
        })
        .count();
    hits as f64 / instances.len() as f64
}
