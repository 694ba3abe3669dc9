//! Retrieval evaluation: nearest-neighbour ranking, MAP/Recall/RR/nDCG at a
//! cutoff, mean-over-tag AUC and normal-approximation confidence intervals.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{by_score_then_id, rank_by_similarity, OracleConfig, RankedList, TagVector, TrackId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub n_relevant: usize,
    /// Graded gain of the ground-truth item at each relevance index.
    pub gains: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 20,
            n_relevant: 5,
            gains: vec![5.0, 4.0, 3.0, 2.0, 1.0],
        }
    }
}

impl EvalConfig {
    /// Linear gains `n, n-1, ..., 1`.
    pub fn new(k: usize, n_relevant: usize) -> Self {
        EvalConfig {
            k,
            n_relevant,
            gains: (1..=n_relevant).rev().map(|g| g as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_relevant == 0 {
            return Err(Error::invalid("k and n_relevant must be >= 1"));
        }
        if self.n_relevant > self.k {
            return Err(Error::invalid("n_relevant must not exceed k"));
        }
        if self.gains.len() != self.n_relevant {
            return Err(Error::dim("gains", self.n_relevant, self.gains.len()));
        }
        if self.gains.iter().any(|g| !(*g > 0.0)) || self.gains.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("gains must be positive and strictly descending"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: TrackId,
    /// System ranking, best first.
    pub estimated: Vec<TrackId>,
    /// Ground-truth relevant items in relevance order.
    pub relevant: Vec<TrackId>,
}

impl RetrievalResult {
    /// Relevance index (0-based) of each of the top-`k` estimated items.
    fn top_k_grades(&self, k: usize) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
        self.estimated
            .iter()
            .take(k)
            .enumerate()
            .map(move |(p, id)| (p + 1, self.relevant.iter().position(|r| r == id)))
    }
}

/// Candidate ids by ascending squared Euclidean distance, ties by ascending id.
pub fn knn_rank(query: &[f64], candidates: &BTreeMap<TrackId, Vec<f64>>) -> Result<Vec<TrackId>> {
    if candidates.is_empty() {
        return Err(Error::invalid("knn_rank over an empty candidate set"));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (&id, v) in candidates {
        if v.len() != query.len() {
            return Err(Error::dim("knn_rank: candidate embedding", query.len(), v.len()));
        }
        let d: f64 = query.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        // Negated so the shared descending-score ordering applies.
        scored.push((id, -d));
    }
    scored.sort_by(by_score_then_id);
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

pub fn average_precision_at_k(result: &RetrievalResult, cfg: &EvalConfig) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (p, grade) in result.top_k_grades(cfg.k) {
        if grade.is_some() {
            hits += 1;
            sum += hits as f64 / p as f64;
        }
    }
    sum / cfg.n_relevant as f64
}

pub fn recall_at_k(result: &RetrievalResult, cfg: &EvalConfig) -> f64 {
    let hits = result.top_k_grades(cfg.k).filter(|(_, g)| g.is_some()).count();
    hits as f64 / cfg.n_relevant as f64
}

pub fn reciprocal_rank_at_k(result: &RetrievalResult, cfg: &EvalConfig) -> f64 {
    result
        .top_k_grades(cfg.k)
        .find(|(_, g)| g.is_some())
        .map_or(0.0, |(p, _)| 1.0 / p as f64)
}

fn discount(position: usize) -> f64 {
    (position as f64 + 1.0).log2()
}

pub fn ndcg_at_k(result: &RetrievalResult, cfg: &EvalConfig) -> f64 {
    let dcg: f64 = result
        .top_k_grades(cfg.k)
        .filter_map(|(p, g)| g.map(|j| cfg.gains[j] / discount(p)))
        .sum();
    let ideal: f64 = cfg
        .gains
        .iter()
        .take(cfg.k.min(result.relevant.len()))
        .enumerate()
        .map(|(i, g)| g / discount(i + 1))
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Mean and 95% half-width (`1.96 s / sqrt(n)`), both scaled by 100.
pub fn aggregate_with_ci(values: &[f64]) -> Result<MetricSummary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid("confidence interval needs at least 2 values"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(MetricSummary {
        mean: 100.0 * mean,
        half_width: 100.0 * 1.96 * var.sqrt() / (n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub half_width: f64,
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.half_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub mean: f64,
    pub per_tag: Vec<Option<f64>>,
    /// Tags without both a positive and a negative example.
    pub skipped: Vec<usize>,
}

/// ROC AUC per tag by pairwise counting (ties count 1/2), averaged over tags
/// that have both classes.
pub fn mean_auc(estimates: &[Vec<f64>], truths: &[Vec<u8>]) -> Result<AucReport> {
    if estimates.len() != truths.len() {
        return Err(Error::dim("mean_auc: truth rows", estimates.len(), truths.len()));
    }
    let m = estimates.first().map_or(0, Vec::len);
    for (e, t) in estimates.iter().zip(truths) {
        if e.len() != m || t.len() != m {
            return Err(Error::dim("mean_auc: row width", m, e.len().max(t.len())));
        }
    }
    let mut per_tag = Vec::with_capacity(m);
    let mut skipped = Vec::new();
    for tag in 0..m {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (e, t) in estimates.iter().zip(truths) {
            if t[tag] != 0 {
                pos.push(e[tag]);
            } else {
                neg.push(e[tag]);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            skipped.push(tag);
            per_tag.push(None);
            continue;
        }
        per_tag.push(Some(rank_sum_auc(&pos, &neg)));
    }
    if !skipped.is_empty() {
        warn!("AUC skipped {} tags lacking one class", skipped.len());
    }
    let included: Vec<f64> = per_tag.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::invalid("no tag has both positive and negative examples"));
    }
    Ok(AucReport {
        mean: included.iter().sum::<f64>() / included.len() as f64,
        per_tag,
        skipped,
    })
}

/// Mann-Whitney U / (|pos| |neg|) via sorted merge with tie groups.
fn rank_sum_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: TrackId,
    pub ap: f64,
    pub recall: f64,
    pub rr: f64,
    pub ndcg: f64,
}

pub fn query_metrics(result: &RetrievalResult, cfg: &EvalConfig) -> QueryMetrics {
    QueryMetrics {
        query: result.query,
        ap: average_precision_at_k(result, cfg),
        recall: recall_at_k(result, cfg),
        rr: reciprocal_rank_at_k(result, cfg),
        ndcg: ndcg_at_k(result, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub map: MetricSummary,
    pub recall: MetricSummary,
    pub rr: MetricSummary,
    pub ndcg: MetricSummary,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricsReport {
    pub fn from_queries(per_query: Vec<QueryMetrics>, k: usize) -> Result<Self> {
        let col = |f: fn(&QueryMetrics) -> f64| aggregate_with_ci(&per_query.iter().map(f).collect::<Vec<_>>());
        Ok(MetricsReport {
            k,
            map: col(|q| q.ap)?,
            recall: col(|q| q.recall)?,
            rr: col(|q| q.rr)?,
            ndcg: col(|q| q.ndcg)?,
            per_query,
        })
    }

    pub fn header(k: usize) -> [String; 4] {
        [
            format!("MAP@{k}"),
            format!("Recall@{k}"),
            format!("RR@{k}"),
            format!("nDCG@{k}"),
        ]
    }

    pub fn columns(&self) -> [MetricSummary; 4] {
        [self.map, self.recall, self.rr, self.ndcg]
    }
}

/// A system's track-level outputs on the evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemOutput {
    /// Ranked by Euclidean distance.
    Embeddings(BTreeMap<TrackId, Vec<f64>>),
    /// Ranked by the oracle similarity applied to the estimates.
    TagEstimates(BTreeMap<TrackId, Vec<f64>>),
}

/// Scores a system against ground-truth rankings; each ranking's query is
/// ranked against the tracks that ranking covers.
pub fn evaluate_system(
    output: &SystemOutput,
    ground_truth: &[RankedList],
    cfg: &EvalConfig,
    oracle: &OracleConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if ground_truth.len() < 2 {
        return Err(Error::invalid("evaluation needs at least 2 queries"));
    }
    let table = match output {
        SystemOutput::Embeddings(t) | SystemOutput::TagEstimates(t) => t,
    };
    let missing: Vec<TrackId> = ground_truth
        .iter()
        .flat_map(|r| std::iter::once(r.query).chain(r.ids()))
        .filter(|id| !table.contains_key(id))
        .collect();
    if let Some(id) = missing.first() {
        return Err(Error::invalid(format!(
            "system output missing for {} evaluated tracks (first: {id})",
            missing.len()
        )));
    }
    let estimated_tags: Option<BTreeMap<TrackId, TagVector>> = match output {
        SystemOutput::TagEstimates(t) => Some(
            t.iter()
                .map(|(&id, v)| Ok((id, TagVector::new(v.clone())?)))
                .collect::<Result<_>>()?,
        ),
        SystemOutput::Embeddings(_) => None,
    };
    let mut per_query = Vec::with_capacity(ground_truth.len());
    // Rankings over the same candidate pool share one candidate table.
    let mut pools: HashMap<Vec<TrackId>, BTreeMap<TrackId, Vec<f64>>> = HashMap::new();
    for gt in ground_truth {
        let mut pool_ids: Vec<TrackId> = gt.ids().chain(std::iter::once(gt.query)).collect();
        pool_ids.sort_unstable();
        let estimated = match &estimated_tags {
            None => {
                let pool = pools
                    .entry(pool_ids.clone())
                    .or_insert_with(|| pool_ids.iter().map(|id| (*id, table[id].clone())).collect());
                let mut candidates = std::mem::take(pool);
                let query_vec = candidates.remove(&gt.query).expect("query in pool");
                let ranked = knn_rank(&query_vec, &candidates);
                candidates.insert(gt.query, query_vec);
                *pool = candidates;
                ranked?
            }
            Some(tags) => {
                let sub: BTreeMap<TrackId, TagVector> = pool_ids.iter().map(|id| (*id, tags[id].clone())).collect();
                rank_by_similarity(gt.query, &sub, oracle)?.ids().collect()
            }
        };
        let result = RetrievalResult {
            query: gt.query,
            estimated,
            relevant: gt.ids().take(cfg.n_relevant).collect(),
        };
        per_query.push(query_metrics(&result, cfg));
    }
    MetricsReport::from_queries(per_query, cfg.k)
}
