//! Nonparametric and parametric statistics: Kruskal-Wallis H test (the PEER
//! fairness metric), paired two-tailed t-test, and Pearson correlation.

pub mod special;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// p-values below this are reported as exactly 0 to avoid denormal noise.
const P_FLOOR: f64 = 1e-300;

fn floor_p(p: f64) -> f64 {
    if p < P_FLOOR {
        0.0
    } else {
        p.min(1.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KruskalWallisResult {
    pub h: f64,
    pub df: usize,
    pub p: f64,
}

/// Kruskal-Wallis H test on pooled mid-ranks with the standard tie
/// correction. p is the chi-square upper-tail probability of H at
/// df = groups - 1.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallisResult> {
    let non_empty: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if non_empty.len() < 2 {
        return Err(Error::NotApplicable(
            "kruskal_wallis needs at least 2 non-empty groups".into(),
        ));
    }
    let n: usize = non_empty.iter().map(|g| g.len()).sum();
    if n < 3 {
        return Err(Error::NotApplicable(
            "kruskal_wallis needs at least 3 total observations".into(),
        ));
    }
    let df = non_empty.len() - 1;

    // Pool all observations, remembering the group of each.
    let mut pooled: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (gi, g) in non_empty.iter().enumerate() {
        for &v in g.iter() {
            pooled.push((v, gi));
        }
    }
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite observations"));

    // Mid-ranks and tie correction term sum(t^3 - t).
    let mut rank_sums = vec![0.0f64; non_empty.len()];
    let mut tie_term = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let tied = (j - i) as f64;
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        for item in &pooled[i..j] {
            rank_sums[item.1] += mid_rank;
        }
        tie_term += tied * tied * tied - tied;
        i = j;
    }

    let nf = n as f64;
    let correction = 1.0 - tie_term / (nf * nf * nf - nf);
    if correction <= 0.0 {
        // All observations identical: no rank separation.
        return Ok(KruskalWallisResult { h: 0.0, df, p: 1.0 });
    }

    let mut h = 0.0;
    for (gi, g) in non_empty.iter().enumerate() {
        h += rank_sums[gi] * rank_sums[gi] / g.len() as f64;
    }
    h = (12.0 / (nf * (nf + 1.0))) * h - 3.0 * (nf + 1.0);
    h /= correction;

    let p = floor_p(special::chi_square_sf(h.max(0.0), df as f64)?);
    Ok(KruskalWallisResult { h, df, p })
}

/// Rank positions of positive documents in one query's final ranked list,
/// partitioned by document language.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankGroups {
    pub query_id: String,
    pub groups: BTreeMap<String, Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerResult {
    pub mean: f64,
    pub evaluable: usize,
    pub skipped: usize,
}

/// Mean Kruskal-Wallis p-value over queries; queries whose rank groups do
/// not satisfy the test preconditions are skipped.
pub fn peer(records: &[RankGroups]) -> Result<PeerResult> {
    let mut sum = 0.0;
    let mut evaluable = 0;
    let mut skipped = 0;
    for record in records {
        let groups: Vec<Vec<f64>> = record
            .groups
            .values()
            .map(|ranks| ranks.iter().map(|&r| r as f64).collect())
            .collect();
        match kruskal_wallis(&groups) {
            Ok(kw) => {
                sum += kw.p;
                evaluable += 1;
            }
            Err(Error::NotApplicable(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if evaluable == 0 {
        return Err(Error::NotApplicable(
            "no query has positives in 2+ languages".into(),
        ));
    }
    Ok(PeerResult {
        mean: sum / evaluable as f64,
        evaluable,
        skipped,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedSample {
    pub labels: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedTResult {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub mean_delta: f64,
    /// Zero variance with nonzero mean difference: p is below any
    /// representable floor.
    pub degenerate: bool,
}

pub fn paired_t_test(sample: &PairedSample) -> Result<PairedTResult> {
    let n = sample.a.len();
    if n != sample.b.len() || n != sample.labels.len() {
        return Err(Error::Precondition("paired sample lists must be parallel".into()));
    }
    if n < 2 {
        return Err(Error::Precondition("paired_t_test needs n >= 2".into()));
    }
    let d: Vec<f64> = sample.a.iter().zip(&sample.b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    let df = n - 1;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(PairedTResult {
                t: 0.0,
                df,
                p: 1.0,
                mean_delta: 0.0,
                degenerate: false,
            });
        }
        return Ok(PairedTResult {
            t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
            df,
            p: 0.0,
            mean_delta: mean,
            degenerate: true,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = floor_p(special::student_t_two_tailed(t, df as f64)?);
    Ok(PairedTResult {
        t,
        df,
        p,
        mean_delta: mean,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    pub p: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::Precondition("pearson needs parallel inputs with n >= 3".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::NotApplicable("pearson input has zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if (1.0 - r * r) <= 0.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        floor_p(special::student_t_two_tailed(t, df)?)
    };
    Ok(PearsonResult { r, p })
}

/// One row of the per-language significance table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub language: String,
    pub n: usize,
    pub baseline_mean: f64,
    pub treatment_mean: f64,
    pub delta_pct: f64,
    pub p: f64,
    pub stars: String,
}

fn stars_for(p: f64) -> String {
    if p < 0.001 {
        "***".into()
    } else if p < 0.01 {
        "**".into()
    } else if p < 0.05 {
        "*".into()
    } else {
        String::new()
    }
}

/// Build the per-language paired-t-test table from per-query scores joined
/// on query id. Delta% is the relative change (new - old) / old * 100.
/// The returned rows end with an "Overall" row pooling all pairs.
pub fn significance_table(
    baseline: &BTreeMap<String, (String, f64)>,
    treatment: &BTreeMap<String, (String, f64)>,
) -> Result<Vec<SignificanceRow>> {
    // Join on query_id; group pairs by query language.
    let mut by_language: BTreeMap<String, PairedSample> = BTreeMap::new();
    let mut overall = PairedSample {
        labels: Vec::new(),
        a: Vec::new(),
        b: Vec::new(),
    };
    for (query_id, (language, base_score)) in baseline {
        if let Some((_, treat_score)) = treatment.get(query_id) {
            let sample = by_language.entry(language.clone()).or_insert_with(|| PairedSample {
                labels: Vec::new(),
                a: Vec::new(),
                b: Vec::new(),
            });
            sample.labels.push(query_id.clone());
            sample.a.push(*treat_score);
            sample.b.push(*base_score);
            overall.labels.push(query_id.clone());
            overall.a.push(*treat_score);
            overall.b.push(*base_score);
        }
    }
    if overall.labels.is_empty() {
        return Err(Error::Precondition("no query ids in common between the two inputs".into()));
    }

    let mut rows = Vec::new();
    let mut emit = |language: String, sample: &PairedSample| -> Result<()> {
        let n = sample.a.len();
        let treatment_mean = sample.a.iter().sum::<f64>() / n as f64;
        let baseline_mean = sample.b.iter().sum::<f64>() / n as f64;
        let delta_pct = if baseline_mean != 0.0 {
            (treatment_mean - baseline_mean) / baseline_mean * 100.0
        } else {
            f64::NAN
        };
        let p = match paired_t_test(sample) {
            Ok(result) => result.p,
            Err(Error::Precondition(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        rows.push(SignificanceRow {
            language,
            n,
            baseline_mean,
            treatment_mean,
            delta_pct,
            p,
            stars: stars_for(p),
        });
        Ok(())
    };
    for (language, sample) in &by_language {
        emit(language.clone(), sample)?;
    }
    emit("Overall".into(), &overall)?;
    Ok(rows)
}
