use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::strategy::Strategy as _;

use tripletrank::io::{read_triplets, write_triplets};
use tripletrank::mining::{group_triplets, mine_triplets, triplet_is_valid, MiningConfig, Strategy};
use tripletrank::oracle::{rank_all, OracleConfig, OracleKind, RankedList, TagVector, TrackId};

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop_oneof![
        Just(Strategy::Neighbors),
        Just(Strategy::RandomUniform),
        Just(Strategy::DistanceBased),
    ]
}

/// Tag tables with N tracks over m tags; some rows are sparse so zero
/// similarities and ties show up.
fn tag_table() -> impl proptest::strategy::Strategy<Value = (Vec<RankedList>, usize)> {
    (4usize..25, 2usize..7).prop_flat_map(|(n, m)| {
        proptest::collection::vec(
            proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..=1.0], m),
            n,
        )
        .prop_map(move |rows| {
            let table: BTreeMap<TrackId, TagVector> = rows
                .into_iter()
                .enumerate()
                .map(|(i, r)| (i as TrackId, TagVector::new(r).unwrap()))
                .collect();
            let kind = if n % 2 == 0 { OracleKind::WeightedJaccard } else { OracleKind::WeightedCosine };
            (rank_all(&table, &OracleConfig::uniform(kind, m)).unwrap(), n)
        })
    })
}

fn config_for(n: usize) -> impl proptest::strategy::Strategy<Value = MiningConfig> {
    (1..=n - 2, any::<u64>(), strategy()).prop_flat_map(move |(np, seed, s)| {
        (1..=n - 1 - np).prop_map(move |nn| MiningConfig {
            strategy: s,
            n_positives: np,
            n_negatives: nn,
            seed,
        })
    })
}

fn case() -> impl proptest::strategy::Strategy<Value = (Vec<RankedList>, MiningConfig)> {
    tag_table().prop_flat_map(|(rankings, n)| (Just(rankings), config_for(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn count_and_validity((rankings, cfg) in case()) {
        let trips = mine_triplets(&rankings, &cfg).unwrap();
        prop_assert_eq!(trips.len(), rankings.len() * cfg.n_positives * cfg.n_negatives);
        let by_query: BTreeMap<TrackId, &RankedList> = rankings.iter().map(|r| (r.query, r)).collect();
        for t in &trips {
            prop_assert!(triplet_is_valid(t, by_query[&t.anchor], &cfg).unwrap(), "{:?}", t);
            prop_assert!(t.anchor != t.positive && t.anchor != t.negative && t.positive != t.negative);
        }
    }

    #[test]
    fn negatives_within_a_pair_are_distinct((rankings, cfg) in case()) {
        let trips = mine_triplets(&rankings, &cfg).unwrap();
        let groups = group_triplets(&trips);
        prop_assert_eq!(groups.len(), rankings.len() * cfg.n_positives);
        for g in &groups {
            let distinct: BTreeSet<_> = g.negatives.iter().collect();
            prop_assert_eq!(distinct.len(), g.negatives.len());
        }
    }

    #[test]
    fn neighbors_take_the_next_ranks((rankings, cfg) in case()) {
        let cfg = MiningConfig { strategy: Strategy::Neighbors, ..cfg };
        for t in mine_triplets(&rankings, &cfg).unwrap() {
            prop_assert!(t.negative_rank > t.positive_rank);
            prop_assert!(t.negative_rank <= t.positive_rank + cfg.n_negatives);
        }
    }

    #[test]
    fn same_seed_same_triplets((rankings, cfg) in case()) {
        prop_assert_eq!(mine_triplets(&rankings, &cfg).unwrap(), mine_triplets(&rankings, &cfg).unwrap());
    }

    #[test]
    fn oversized_requests_are_rejected((rankings, cfg) in case()) {
        let n = rankings.len();
        let too_many = MiningConfig { n_negatives: n - cfg.n_positives, ..cfg.clone() };
        prop_assert!(mine_triplets(&rankings, &too_many).is_err());
        let too_deep = MiningConfig { n_positives: n - 1, n_negatives: 1, ..cfg };
        prop_assert!(mine_triplets(&rankings, &too_deep).is_err());
    }
}

#[test]
fn triplet_file_round_trip() {
    let table: BTreeMap<TrackId, TagVector> = (0..12)
        .map(|i| (i, TagVector::new(vec![(i % 3) as f64 / 2.0, (i % 4) as f64 / 3.0, 0.5]).unwrap()))
        .collect();
    let rankings = rank_all(&table, &OracleConfig::uniform(OracleKind::WeightedJaccard, 3)).unwrap();
    let cfg = MiningConfig {
        strategy: Strategy::DistanceBased,
        n_positives: 3,
        n_negatives: 4,
        seed: 11,
    };
    let trips = mine_triplets(&rankings, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tsv");
    write_triplets(&path, &trips, cfg.strategy).unwrap();
    let (back, s) = read_triplets(&path).unwrap();
    assert_eq!(back, trips);
    assert_eq!(s, Some(Strategy::DistanceBased));
}
