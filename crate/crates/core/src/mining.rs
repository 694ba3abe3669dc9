//! Offline triplet mining from ground-truth ranked lists.
//!
//! For an anchor `t` with ranking `r_1(t), ..., r_{N-1}(t)`, positives are the
//! first `N_p` entries and each `(anchor, r_i)` pair receives `N_n` negatives
//! from ranks `j > i`, chosen by one of three strategies:
//!
//! * `neighbors`: ranks `i+1, ..., i+N_n`, in order;
//! * `uniform`: uniformly over the whole tail `{i+1, ..., N-1}`;
//! * `distance`: proportionally to the oracle similarity with the anchor.
//!
//! Negatives are distinct within one pair. Ranks are 1-based throughout.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{RankedList, TrackId};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "neighbors")]
    Neighbors,
    #[serde(rename = "uniform", alias = "random-uniform")]
    RandomUniform,
    #[serde(rename = "distance", alias = "distance-based")]
    DistanceBased,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::Neighbors,
        Strategy::RandomUniform,
        Strategy::DistanceBased,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Neighbors => "neighbors",
            Strategy::RandomUniform => "uniform",
            Strategy::DistanceBased => "distance",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighbors" => Ok(Strategy::Neighbors),
            "uniform" | "random-uniform" => Ok(Strategy::RandomUniform),
            "distance" | "distance-based" => Ok(Strategy::DistanceBased),
            other => Err(Error::invalid(format!("unknown mining strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub strategy: Strategy,
    pub n_positives: usize,
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            strategy: Strategy::DistanceBased,
            n_positives: 15,
            n_negatives: 250,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_positives == 0 {
            return Err(Error::invalid("n_positives must be >= 1"));
        }
        if self.n_negatives == 0 {
            return Err(Error::invalid("n_negatives must be >= 1"));
        }
        Ok(())
    }

    /// Copy with `n_negatives` reduced so every pair can be filled from
    /// rankings of length `ranking_len`.
    pub fn capped_to(&self, ranking_len: usize) -> MiningConfig {
        let room = ranking_len.saturating_sub(self.n_positives).max(1);
        MiningConfig {
            n_negatives: self.n_negatives.min(room),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: TrackId,
    pub positive: TrackId,
    pub negative: TrackId,
    pub positive_rank: usize,
    pub negative_rank: usize,
}

pub fn triplet_is_valid(trip: &Triplet, ranking: &RankedList, cfg: &MiningConfig) -> Result<bool> {
    if ranking.query != trip.anchor {
        return Err(Error::invalid(format!(
            "triplet anchor {} checked against ranking of {}",
            trip.anchor, ranking.query
        )));
    }
    let (i, j) = (trip.positive_rank, trip.negative_rank);
    let placed = |id: TrackId, rank: usize| ranking.at_rank(rank).is_some_and(|(t, _)| t == id);
    Ok(i < j && i <= cfg.n_positives && placed(trip.positive, i) && placed(trip.negative, j))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeDraw {
    pub id: TrackId,
    pub rank: usize,
    /// Distance-based draw fell back to uniform because the tail has zero similarity.
    pub fallback: bool,
}

fn tail_len(ranking: &RankedList, positive_rank: usize) -> Result<usize> {
    if positive_rank >= ranking.len() {
        return Err(Error::Exhausted {
            rank: positive_rank,
            len: ranking.len(),
        });
    }
    Ok(ranking.len() - positive_rank)
}

/// One negative for the positive at `positive_rank`.
pub fn sample_negative(
    ranking: &RankedList,
    positive_rank: usize,
    strategy: Strategy,
    rng: &mut seed::Rng,
) -> Result<NegativeDraw> {
    let pool = tail_len(ranking, positive_rank)?;
    let draw = |offset: usize, fallback: bool| {
        let rank = positive_rank + 1 + offset;
        NegativeDraw {
            id: ranking.entries[rank - 1].0,
            rank,
            fallback,
        }
    };
    match strategy {
        Strategy::Neighbors => Ok(draw(0, false)),
        Strategy::RandomUniform => Ok(draw(rng.random_range(0..pool), false)),
        Strategy::DistanceBased => {
            let tail = &ranking.entries[positive_rank..];
            let total: f64 = tail.iter().map(|e| e.1).sum();
            if total <= 0.0 {
                return Ok(draw(rng.random_range(0..pool), true));
            }
            let mut u = rng.random::<f64>() * total;
            for (offset, e) in tail.iter().enumerate() {
                if u < e.1 {
                    return Ok(draw(offset, false));
                }
                u -= e.1;
            }
            // Rounding left `u` past the last bucket.
            let last = tail.iter().rposition(|e| e.1 > 0.0).unwrap_or(pool - 1);
            Ok(draw(last, false))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    /// `(id, rank)` in selection order.
    pub picks: Vec<(TrackId, usize)>,
    pub fallback: bool,
    /// Fewer candidates than requested; the whole tail was returned.
    pub truncated: bool,
}

/// `count` distinct negatives for the positive at `positive_rank`.
///
/// Distance-based selection uses Efraimidis-Spirakis keys `ln(u) / w`, which
/// gives the same distribution as drawing proportionally to `w` one item at a
/// time without replacement.
pub fn sample_negatives(
    ranking: &RankedList,
    positive_rank: usize,
    count: usize,
    strategy: Strategy,
    rng: &mut seed::Rng,
) -> Result<NegativeSample> {
    let pool = tail_len(ranking, positive_rank)?;
    let pick = |offset: usize| {
        let rank = positive_rank + 1 + offset;
        (ranking.entries[rank - 1].0, rank)
    };
    if pool <= count {
        if pool < count {
            warn!(
                "anchor {}: only {pool} negatives after rank {positive_rank}, wanted {count}",
                ranking.query
            );
        }
        return Ok(NegativeSample {
            picks: (0..pool).map(pick).collect(),
            fallback: false,
            truncated: pool < count,
        });
    }
    let mut fallback = false;
    let offsets: Vec<usize> = match strategy {
        Strategy::Neighbors => (0..count).collect(),
        Strategy::RandomUniform => index::sample(rng, pool, count).into_vec(),
        Strategy::DistanceBased => {
            let tail = &ranking.entries[positive_rank..];
            let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(pool);
            let mut zero: Vec<usize> = Vec::new();
            for (offset, e) in tail.iter().enumerate() {
                if e.1 > 0.0 {
                    // u in (0, 1]
                    let u = 1.0 - rng.random::<f64>();
                    keyed.push((u.ln() / e.1, offset));
                } else {
                    zero.push(offset);
                }
            }
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut chosen: Vec<usize> = keyed.iter().take(count).map(|k| k.1).collect();
            if chosen.len() < count {
                fallback = true;
                let need = count - chosen.len();
                chosen.extend(index::sample(rng, zero.len(), need).into_iter().map(|z| zero[z]));
            }
            chosen
        }
    };
    Ok(NegativeSample {
        picks: offsets.into_iter().map(pick).collect(),
        fallback,
        truncated: false,
    })
}

/// `N_p * N_n` triplets per ranking, in ranking order, then positive rank,
/// then selection order.
pub fn mine_triplets(rankings: &[RankedList], cfg: &MiningConfig) -> Result<Vec<Triplet>> {
    cfg.validate()?;
    for r in rankings {
        if cfg.n_positives + 1 > r.len() {
            return Err(Error::invalid(format!(
                "n_positives + 1 <= N - 1 violated: N_p = {}, ranking of {} has {} entries",
                cfg.n_positives,
                r.query,
                r.len()
            )));
        }
        if cfg.n_negatives > r.len() - cfg.n_positives {
            return Err(Error::invalid(format!(
                "n_negatives <= N - 1 - N_p violated: N_n = {}, ranking of {} leaves {} candidates after rank {}",
                cfg.n_negatives,
                r.query,
                r.len() - cfg.n_positives,
                cfg.n_positives
            )));
        }
    }
    let mut out = Vec::with_capacity(rankings.len() * cfg.n_positives * cfg.n_negatives);
    let mut fallbacks = 0usize;
    for r in rankings {
        let mut rng = seed::derived_rng(cfg.seed, "mine", u64::from(r.query));
        for i in 1..=cfg.n_positives {
            let positive = r.entries[i - 1].0;
            let sample = sample_negatives(r, i, cfg.n_negatives, cfg.strategy, &mut rng)?;
            fallbacks += usize::from(sample.fallback);
            out.extend(sample.picks.into_iter().map(|(negative, j)| Triplet {
                anchor: r.query,
                positive,
                negative,
                positive_rank: i,
                negative_rank: j,
            }));
        }
    }
    if fallbacks > 0 {
        warn!("{fallbacks} anchor-positive pairs fell back to uniform negatives (zero similarity tail)");
    }
    Ok(out)
}

/// Triplets sharing one `(anchor, positive)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletGroup {
    pub anchor: TrackId,
    pub positive: TrackId,
    pub negatives: Vec<TrackId>,
}

/// Groups consecutive triplets by `(anchor, positive)`, as emitted by [`mine_triplets`].
pub fn group_triplets(triplets: &[Triplet]) -> Vec<TripletGroup> {
    let mut groups: Vec<TripletGroup> = Vec::new();
    for t in triplets {
        match groups.last_mut() {
            Some(g) if g.anchor == t.anchor && g.positive == t.positive => g.negatives.push(t.negative),
            _ => groups.push(TripletGroup {
                anchor: t.anchor,
                positive: t.positive,
                negatives: vec![t.negative],
            }),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(scores: &[f64]) -> RankedList {
        RankedList {
            query: 0,
            entries: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (i as TrackId + 1, s))
                .collect(),
        }
    }

    fn cfg(strategy: Strategy, np: usize, nn: usize) -> MiningConfig {
        MiningConfig {
            strategy,
            n_positives: np,
            n_negatives: nn,
            seed: 3,
        }
    }

    fn trip(i: usize, j: usize) -> Triplet {
        Triplet {
            anchor: 0,
            positive: i as TrackId,
            negative: j as TrackId,
            positive_rank: i,
            negative_rank: j,
        }
    }

    #[test]
    fn validity_rule() {
        let r = ranking(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]);
        let c = cfg(Strategy::Neighbors, 15, 3);
        assert!(triplet_is_valid(&trip(2, 7), &r, &c).unwrap());
        assert!(!triplet_is_valid(&trip(7, 2), &r, &c).unwrap());
        assert!(!triplet_is_valid(&trip(4, 4), &r, &c).unwrap());
        assert!(!triplet_is_valid(&trip(4, 6), &r, &cfg(Strategy::Neighbors, 3, 3)).unwrap());
        let mut wrong_rank = trip(2, 7);
        wrong_rank.negative_rank = 6;
        assert!(!triplet_is_valid(&wrong_rank, &r, &c).unwrap());
        let mut other_anchor = trip(2, 7);
        other_anchor.anchor = 5;
        assert!(triplet_is_valid(&other_anchor, &r, &c).is_err());
    }

    #[test]
    fn neighbors_walk_in_order() {
        let r = ranking(&[0.9; 9]);
        let mut rng = seed::rng(0);
        let s = sample_negatives(&r, 3, 4, Strategy::Neighbors, &mut rng).unwrap();
        let ranks: Vec<usize> = s.picks.iter().map(|p| p.1).collect();
        assert_eq!(ranks, vec![4, 5, 6, 7]);
        assert_eq!(sample_negative(&r, 3, Strategy::Neighbors, &mut rng).unwrap().rank, 4);
    }

    #[test]
    fn exhausted_tail() {
        let r = ranking(&[0.5; 4]);
        let mut rng = seed::rng(0);
        assert!(matches!(
            sample_negative(&r, 4, Strategy::RandomUniform, &mut rng),
            Err(Error::Exhausted { .. })
        ));
        let s = sample_negatives(&r, 2, 5, Strategy::DistanceBased, &mut rng).unwrap();
        assert!(s.truncated);
        assert_eq!(s.picks, vec![(3, 3), (4, 4)]);
    }

    #[test]
    fn zero_similarity_tail_falls_back() {
        let r = ranking(&[0.9, 0.0, 0.0, 0.0, 0.0]);
        let mut rng = seed::rng(1);
        let d = sample_negative(&r, 1, Strategy::DistanceBased, &mut rng).unwrap();
        assert!(d.fallback && d.rank > 1);
        let s = sample_negatives(&r, 1, 2, Strategy::DistanceBased, &mut rng).unwrap();
        assert!(s.fallback);
        assert_eq!(s.picks.len(), 2);
        assert!(s.picks[0] != s.picks[1]);
    }

    #[test]
    fn distance_without_replacement_prefers_positive_weight() {
        let r = ranking(&[0.9, 0.5, 0.0, 0.3, 0.0, 0.0]);
        let mut rng = seed::rng(2);
        let s = sample_negatives(&r, 1, 3, Strategy::DistanceBased, &mut rng).unwrap();
        let mut ranks: Vec<usize> = s.picks.iter().map(|p| p.1).collect();
        ranks.truncate(2);
        ranks.sort_unstable();
        assert_eq!(ranks, vec![2, 4]);
        assert!(s.fallback);
    }

    #[test]
    fn count_and_neighbor_ranks() {
        let rankings: Vec<RankedList> = (0..10)
            .map(|q| {
                let mut r = ranking(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]);
                r.query = 100 + q;
                r
            })
            .collect();
        let c = cfg(Strategy::Neighbors, 2, 3);
        let t = mine_triplets(&rankings, &c).unwrap();
        assert_eq!(t.len(), 60);
        for tr in &t {
            assert!(tr.negative_rank > tr.positive_rank && tr.negative_rank <= tr.positive_rank + 3);
        }
        let groups = group_triplets(&t);
        assert_eq!(groups.len(), 20);
        for g in &groups {
            assert_eq!(g.negatives.len(), 3);
        }
    }

    #[test]
    fn too_small_for_bounds() {
        let r = vec![ranking(&[0.5; 5])];
        let err = mine_triplets(&r, &cfg(Strategy::RandomUniform, 5, 1)).unwrap_err();
        assert!(err.to_string().contains("n_positives"));
        let err = mine_triplets(&r, &cfg(Strategy::RandomUniform, 2, 4)).unwrap_err();
        assert!(err.to_string().contains("n_negatives"));
        assert!(mine_triplets(&r, &cfg(Strategy::RandomUniform, 2, 3)).is_ok());
        assert_eq!(cfg(Strategy::RandomUniform, 2, 250).capped_to(5).n_negatives, 3);
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("closest".parse::<Strategy>().is_err());
    }
}
