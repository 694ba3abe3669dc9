//! Oracle similarity over tag-likelihood vectors and the ground-truth
//! rankings it induces.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TrackId = u32;

/// Per-track tag likelihoods, each component in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TagVector(Vec<f64>);

impl TagVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("tag {i} is not finite")));
            }
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!("tag {i} = {v} outside [0, 1]")));
            }
        }
        Ok(TagVector(values))
    }

    pub fn zeros(m: usize) -> Self {
        TagVector(vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Number of tags with non-zero likelihood.
    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&v| v > 0.0).count()
    }
}

impl TryFrom<Vec<f64>> for TagVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        TagVector::new(values)
    }
}

impl From<TagVector> for Vec<f64> {
    fn from(t: TagVector) -> Self {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    #[default]
    WeightedJaccard,
    WeightedCosine,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Per-tag weights; empty is only meaningful where `m` is known elsewhere.
    pub weights: Vec<f64>,
}

impl OracleConfig {
    pub fn uniform(kind: OracleKind, m: usize) -> Self {
        OracleConfig {
            kind,
            weights: vec![1.0; m],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::invalid("oracle weights are empty"));
        }
        if let Some(i) = self
            .weights
            .iter()
            .position(|w| !w.is_finite() || *w <= 0.0)
        {
            return Err(Error::invalid(format!(
                "oracle weight {i} must be finite and > 0"
            )));
        }
        Ok(())
    }
}

/// Similarity in `[0, 1]` between two tag vectors.
///
/// Sums run in ascending tag order and every per-tag term is symmetric in its
/// arguments, so `S(a, b)` and `S(b, a)` agree bit for bit.
pub fn oracle_similarity(a: &TagVector, b: &TagVector, cfg: &OracleConfig) -> Result<f64> {
    let m = cfg.weights.len();
    if a.len() != m {
        return Err(Error::dim("oracle_similarity: first tag vector", m, a.len()));
    }
    if b.len() != m {
        return Err(Error::dim("oracle_similarity: second tag vector", m, b.len()));
    }
    Ok(similarity_unchecked(a.values(), b.values(), cfg))
}

pub(crate) fn similarity_unchecked(a: &[f64], b: &[f64], cfg: &OracleConfig) -> f64 {
    match cfg.kind {
        OracleKind::WeightedJaccard => {
            let mut num = 0.0;
            let mut den = 0.0;
            for ((&x, &y), &w) in a.iter().zip(b).zip(&cfg.weights) {
                num += w * x.min(y);
                den += w * x.max(y);
            }
            if den == 0.0 {
                0.0
            } else {
                num / den
            }
        }
        OracleKind::WeightedCosine => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for ((&x, &y), &w) in a.iter().zip(b).zip(&cfg.weights) {
                let (wx, wy) = (w * x, w * y);
                dot += wx * wy;
                na += wx * wx;
                nb += wy * wy;
            }
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
            }
        }
    }
}

/// Tracks other than the query, by descending similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: TrackId,
    pub entries: Vec<(TrackId, f64)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Track at 1-based rank `rank`.
    pub fn at_rank(&self, rank: usize) -> Option<(TrackId, f64)> {
        rank.checked_sub(1).and_then(|i| self.entries.get(i).copied())
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: TrackId) -> Option<usize> {
        self.entries.iter().position(|&(t, _)| t == id).map(|p| p + 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.entries.iter().map(|&(id, _)| id)
    }

    pub fn truncated(&self, k: usize) -> RankedList {
        RankedList {
            query: self.query,
            entries: self.entries.iter().take(k).copied().collect(),
        }
    }
}

/// Descending score, then ascending id.
pub(crate) fn by_score_then_id(a: &(TrackId, f64), b: &(TrackId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

pub fn rank_by_similarity(
    query: TrackId,
    corpus: &BTreeMap<TrackId, TagVector>,
    cfg: &OracleConfig,
) -> Result<RankedList> {
    if corpus.len() < 2 {
        return Err(Error::invalid("ranking needs at least 2 tracks"));
    }
    let q = corpus.get(&query).ok_or(Error::UnknownTrack(query))?;
    let mut entries = Vec::with_capacity(corpus.len() - 1);
    for (&id, tags) in corpus {
        if id == query {
            continue;
        }
        entries.push((id, oracle_similarity(q, tags, cfg)?));
    }
    entries.sort_by(by_score_then_id);
    Ok(RankedList { query, entries })
}

/// Ground-truth rankings for every track of `corpus`, in ascending query id.
pub fn rank_all(
    corpus: &BTreeMap<TrackId, TagVector>,
    cfg: &OracleConfig,
) -> Result<Vec<RankedList>> {
    corpus
        .keys()
        .map(|&q| rank_by_similarity(q, corpus, cfg))
        .collect()
}

/// Mean similarity at each rank, over all queries.
pub fn similarity_profile(rankings: &[RankedList]) -> Result<Vec<f64>> {
    let first = rankings
        .first()
        .ok_or_else(|| Error::invalid("similarity profile of an empty corpus"))?;
    let len = first.len();
    let mut sums = vec![0.0; len];
    for r in rankings {
        if r.len() != len {
            return Err(Error::dim("similarity_profile: ranking length", len, r.len()));
        }
        for (s, &(_, score)) in sums.iter_mut().zip(&r.entries) {
            *s += score;
        }
    }
    let n = rankings.len() as f64;
    let mut profile: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    // Rounding in the sums can break monotonicity by an ulp.
    for j in 1..profile.len() {
        if profile[j] > profile[j - 1] {
            profile[j] = profile[j - 1];
        }
    }
    Ok(profile)
}
