use super::*;
use crate::corpus::{generate_corpus, split_corpus, CorpusConfig, DEFAULT_RATIOS};
use crate::mining::{mine_triplets, MiningConfig, Strategy};
use crate::net::{ConvSpec, ModelConfig, TemporalPool};
use crate::oracle::{rank_all, OracleConfig, OracleKind};

fn adam_cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = Parameters {
        values: vec![0.3, -1.0],
    };
    let mut st = OptimizerState::new(2);
    adam_step(&mut p, &[0.0, 0.0], &mut st, &adam_cfg(1e-3)).unwrap();
    assert_eq!(p.values, vec![0.3, -1.0]);
    assert_eq!(st.step, 1);
    assert_eq!(st.first_moment, vec![0.0, 0.0]);

    st.first_moment = vec![0.5, 0.2];
    st.second_moment = vec![0.1, 0.4];
    adam_step(&mut p, &[0.0, 0.0], &mut st, &adam_cfg(1e-3)).unwrap();
    assert!((st.first_moment[0] - 0.45).abs() < 1e-15);
    assert!((st.second_moment[1] - 0.4 * 0.999).abs() < 1e-15);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = Parameters { values: vec![1.0] };
    let mut st = OptimizerState::new(1);
    adam_step(&mut p, &[1.0], &mut st, &adam_cfg(1e-3)).unwrap();
    // m_hat = v_hat = 1: delta = lr / (1 + eps)
    let delta = 1.0 - p.values[0];
    assert!((delta - 9.99999e-4).abs() < 1e-9, "{delta}");
}

#[test]
fn adam_step_is_bounded_by_learning_rate() {
    let mut rng = seed::rng(1);
    let mut p = Parameters { values: vec![0.0; 50] };
    let mut st = OptimizerState::new(50);
    let lr = 1e-2;
    for _ in 0..100 {
        let g: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let before = p.values.clone();
        adam_step(&mut p, &g, &mut st, &adam_cfg(lr)).unwrap();
        for (a, b) in before.iter().zip(&p.values) {
            // |m_hat| / sqrt(v_hat) <= (1 - b1) / sqrt(1 - b2) for one large gradient.
            assert!((a - b).abs() <= lr * (1.0 - 0.9) / (1.0f64 - 0.999).sqrt() * 1.01);
        }
    }
    assert!(adam_step(&mut p, &[0.0], &mut st, &adam_cfg(lr)).is_err());
}

struct Scripted {
    val: Vec<f64>,
    calls: usize,
}

impl Trainer for Scripted {
    fn train_epoch(&mut self, params: &mut Parameters, _: &mut OptimizerState, epoch: usize) -> Result<f64> {
        params.values[0] = epoch as f64;
        Ok(1.0 / epoch as f64)
    }

    fn validation_loss(&mut self, _: &Parameters) -> Result<f64> {
        let v = if self.calls == 0 { 9.0 } else { self.val[self.calls - 1] };
        self.calls += 1;
        Ok(v)
    }
}

#[test]
fn early_stopping_returns_best_epoch() {
    let cfg = TrainConfig {
        patience: 1,
        max_epochs: 10,
        ..TrainConfig::default()
    };
    let mut t = Scripted {
        val: vec![1.0, 1.1, 0.5],
        calls: 0,
    };
    let (p, report) = fit(&mut t, Parameters { values: vec![0.0] }, &cfg).unwrap();
    assert_eq!(report.stopped_epoch, 2);
    assert_eq!(report.best_epoch, 1);
    assert_eq!(p.values[0], 1.0);
    assert_eq!(report.best_val_loss(), 1.0);

    let cfg = TrainConfig {
        patience: 2,
        max_epochs: 10,
        ..TrainConfig::default()
    };
    let mut t = Scripted {
        val: vec![1.0, 1.1, 0.5, 0.7, 0.6, 0.9],
        calls: 0,
    };
    let (p, report) = fit(&mut t, Parameters { values: vec![0.0] }, &cfg).unwrap();
    assert_eq!((report.stopped_epoch, report.best_epoch), (5, 3));
    assert_eq!(p.values[0], 3.0);
    let min = report.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss(), min);
}

#[test]
fn divergence_names_epoch() {
    let cfg = TrainConfig {
        max_epochs: 5,
        ..TrainConfig::default()
    };
    let mut t = Scripted {
        val: vec![1.0, f64::NAN],
        calls: 0,
    };
    let err = fit(&mut t, Parameters { values: vec![0.0] }, &cfg).unwrap_err();
    assert!(err.to_string().contains("epoch 2"), "{err}");
}

struct Fixture {
    corpus: Corpus,
    train: Vec<Triplet>,
    val: Vec<Triplet>,
    train_ids: Vec<TrackId>,
    val_ids: Vec<TrackId>,
}

fn fixture() -> Fixture {
    let corpus = generate_corpus(&CorpusConfig {
        n_tracks: 40,
        n_tags: 6,
        patch_freq_bins: 8,
        patch_frames: 8,
        tags_per_track: [1, 3],
        noise_sigma: 0.05,
        seed: 5,
    })
    .unwrap();
    let split = split_corpus(&corpus.ids().collect::<Vec<_>>(), DEFAULT_RATIOS, 5).unwrap();
    let oracle = OracleConfig::uniform(OracleKind::WeightedJaccard, 6);
    let mine = MiningConfig {
        strategy: Strategy::DistanceBased,
        n_positives: 2,
        n_negatives: 4,
        seed: 1,
    };
    let tr = rank_all(&corpus.tag_table_for(&split.train).unwrap(), &oracle).unwrap();
    let va = rank_all(&corpus.tag_table_for(&split.validation).unwrap(), &oracle).unwrap();
    Fixture {
        train: mine_triplets(&tr, &mine).unwrap(),
        val: mine_triplets(&va, &mine).unwrap(),
        corpus,
        train_ids: split.train,
        val_ids: split.validation,
    }
}

fn tiny_model(mode: ModelMode) -> ModelConfig {
    ModelConfig {
        mode,
        input: [8, 8],
        layers: vec![ConvSpec::new([3, 3], 4, [2, 2])],
        embedding_dim: 4,
        n_tags: 6,
        temporal_pool: TemporalPool::Max,
        autopool_shared: false,
    }
}

#[test]
fn minibatch_shares_anchor_and_positive() {
    let f = fixture();
    let b = build_minibatch(&f.train, &f.corpus, 3, 11).unwrap();
    assert_eq!(b.negatives.len(), 3);
    let group: Vec<&Triplet> = f
        .train
        .iter()
        .filter(|t| t.anchor == b.anchor && t.positive == b.positive)
        .collect();
    for (id, _) in &b.negatives {
        assert!(group.iter().any(|t| t.negative == *id));
    }
    assert_eq!(b, build_minibatch(&f.train, &f.corpus, 3, 11).unwrap());
    let single = build_minibatch(&f.train, &f.corpus, 1, 2).unwrap();
    assert_eq!(single.negatives.len(), 1);
    let oversize = build_minibatch(&f.train, &f.corpus, 10, 2).unwrap();
    assert_eq!(oversize.negatives.len(), 4);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let f = fixture();
    let net = Network::new(tiny_model(ModelMode::Embed)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_triplets: 4,
        max_epochs: 2,
        patience: 5,
        ..TrainConfig::default()
    };
    let data = TrainingData::Triplets {
        train: &f.train,
        validation: &f.val,
    };
    let (p, _) = train(&net, &f.corpus, data, &cfg).unwrap();
    assert_eq!(p, net.init_params(seed::derive(cfg.seed, "model-init", 0)));
}

#[test]
fn training_is_deterministic_and_learns() {
    let f = fixture();
    let net = Network::new(tiny_model(ModelMode::Embed)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_triplets: 4,
        max_epochs: 8,
        patience: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = || {
        train(
            &net,
            &f.corpus,
            TrainingData::Triplets {
                train: &f.train,
                validation: &f.val,
            },
            &cfg,
        )
        .unwrap()
    };
    let (p1, r1) = run();
    let (p2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(p1, p2);
    assert!(r1.train_loss.last().unwrap() < &r1.train_loss[0], "{:?}", r1.train_loss);

    let tagger = Network::new(tiny_model(ModelMode::Tag)).unwrap();
    let tcfg = TrainConfig {
        batch_triplets: 8,
        tagger_passes: 2,
        max_epochs: 6,
        patience: 6,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let (_, tr) = train(
        &tagger,
        &f.corpus,
        TrainingData::Tags {
            train: &f.train_ids,
            validation: &f.val_ids,
        },
        &tcfg,
    )
    .unwrap();
    assert!(tr.best_val_loss() < tr.initial_val_loss);
}

#[test]
fn mode_mismatch_is_rejected() {
    let f = fixture();
    let tagger = Network::new(tiny_model(ModelMode::Tag)).unwrap();
    let data = TrainingData::Triplets {
        train: &f.train,
        validation: &f.val,
    };
    assert!(train(&tagger, &f.corpus, data, &TrainConfig::default()).is_err());
    let bad = TrainConfig {
        margin: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}
