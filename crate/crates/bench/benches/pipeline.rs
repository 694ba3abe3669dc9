use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use tripletrank::eval::{evaluate_system, EvalConfig, SystemOutput};
use tripletrank::experiment::random_embeddings;
use tripletrank::mining::{mine_triplets, MiningConfig, Strategy};
use tripletrank::net::{ConvSpec, ModelConfig, ModelMode, Network, TemporalPool};
use tripletrank::oracle::{rank_all, OracleConfig, OracleKind};
use tripletrank::{generate_corpus, CorpusConfig};

fn model(pool: TemporalPool) -> ModelConfig {
    ModelConfig {
        mode: ModelMode::Embed,
        layers: vec![ConvSpec::new([3, 3], 8, [2, 2]), ConvSpec::new([3, 3], 16, [2, 2])],
        embedding_dim: 16,
        temporal_pool: pool,
        ..ModelConfig::default()
    }
}

fn network(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let patch = corpus.patches(0, 1, 1).unwrap().remove(0);
    for (name, pool) in [("max", TemporalPool::Max), ("autopool", TemporalPool::Autopool)] {
        let net = Network::new(model(pool)).unwrap();
        let params = net.init_params(1);
        c.bench_function(&format!("forward/{name}"), |b| {
            b.iter(|| net.forward(&params, black_box(&patch)).unwrap())
        });
        let (y, cache) = net.forward(&params, &patch).unwrap();
        let g = vec![1.0; y.len()];
        let mut grads = net.zero_grads();
        c.bench_function(&format!("backward/{name}"), |b| {
            b.iter(|| net.backward_into(&params, &cache, black_box(&g), &mut grads).unwrap())
        });
    }
}

fn mining(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let oracle = OracleConfig::uniform(OracleKind::WeightedJaccard, corpus.config.n_tags);
    let tags = corpus.tag_table();
    c.bench_function("rank_all/600", |b| b.iter(|| rank_all(black_box(&tags), &oracle).unwrap()));
    let rankings = rank_all(&tags, &oracle).unwrap();
    for s in Strategy::ALL {
        let cfg = MiningConfig {
            strategy: s,
            n_positives: 15,
            n_negatives: 250,
            seed: 1,
        };
        c.bench_function(&format!("mine/{s}"), |b| {
            b.iter_batched(|| cfg.clone(), |cfg| mine_triplets(&rankings, &cfg).unwrap(), BatchSize::SmallInput)
        });
    }
}

fn metrics(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusConfig {
        n_tracks: 120,
        ..CorpusConfig::default()
    })
    .unwrap();
    let oracle = OracleConfig::uniform(OracleKind::WeightedJaccard, corpus.config.n_tags);
    let truth = rank_all(&corpus.tag_table(), &oracle).unwrap();
    let ids: Vec<u32> = corpus.ids().collect();
    let emb: BTreeMap<u32, Vec<f64>> = random_embeddings(&ids, 16, 3);
    let cfg = EvalConfig::default();
    c.bench_function("evaluate/embeddings-120", |b| {
        b.iter(|| evaluate_system(&SystemOutput::Embeddings(emb.clone()), &truth, &cfg, &oracle).unwrap())
    });
}

criterion_group!(benches, network, mining, metrics);
criterion_main!(benches);
