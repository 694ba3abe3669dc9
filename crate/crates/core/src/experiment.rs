//! End-to-end experiment pipeline with resumable, content-addressed stages.
//!
//! Stages run in the order generate, rank, mine, train, infer (embed or
//! estimate tags), evaluate, report. Each stage writes its outputs atomically
//! and then a marker `.stages/<stage>.done` holding a hash of everything the
//! stage depends on. A stage whose marker hash matches and whose outputs all
//! exist is skipped. Downstream stages always read upstream outputs back from
//! disk, so a resumed run and a fresh run see identical inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{binarize_tags, generate_corpus, split_corpus, Corpus, CorpusConfig, Split, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_system, mean_auc, EvalConfig, MetricSummary, MetricsReport, SystemOutput};
use crate::io;
use crate::mining::{mine_triplets, MiningConfig, Strategy, Triplet};
use crate::net::{ModelConfig, ModelMode, Network, TemporalPool};
use crate::oracle::{rank_all, similarity_profile, OracleConfig, RankedList, TrackId};
use crate::seed;
use crate::train::{train, TrainConfig, TrainReport, TrainingData};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A retrieval system compared in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    /// Tagger; tracks are compared through the oracle applied to estimated tags.
    Tagger,
    Neighbors,
    Uniform,
    Distance,
    /// Triplet network with auto-pooling over time.
    Autopool,
    /// Untrained random unit embeddings.
    Random,
}

impl System {
    pub const ALL: [System; 6] = [
        System::Tagger,
        System::Neighbors,
        System::Uniform,
        System::Distance,
        System::Autopool,
        System::Random,
    ];

    pub fn key(self) -> &'static str {
        match self {
            System::Tagger => "tagger",
            System::Neighbors => "neighbors",
            System::Uniform => "uniform",
            System::Distance => "distance",
            System::Autopool => "autopool",
            System::Random => "random",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            System::Tagger => "AT",
            System::Neighbors => "TL Neighbors",
            System::Uniform => "TL Random uniform",
            System::Distance => "TL Distance-based",
            System::Autopool => "TL Autopool",
            System::Random => "Random",
        }
    }

    pub fn is_trained(self) -> bool {
        self != System::Random
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        System::ALL
            .into_iter()
            .find(|sys| sys.key() == s)
            .or(match s.as_str() {
                "at" => Some(System::Tagger),
                "random-uniform" => Some(System::Uniform),
                "distance-based" => Some(System::Distance),
                _ => None,
            })
            .ok_or_else(|| Error::invalid(format!("unknown system `{s}`")))
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mixed into every section seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub systems: Vec<System>,
    pub split_ratios: [f64; 3],
    /// Patches averaged per test track at inference.
    pub embed_patches: usize,
    /// Mining strategy used for the auto-pooling system.
    pub autopool_strategy: Strategy,
    pub corpus: CorpusConfig,
    /// Empty weights mean uniform weights over the corpus tags.
    pub oracle: OracleConfig,
    /// `strategy` is the default for a bare `mine`; systems pick their own.
    pub mining: MiningConfig,
    /// Shared architecture; mode, pooling and output size are set per system.
    pub model: ModelConfig,
    /// Triplet training.
    pub training: TrainConfig,
    /// Tagger training; falls back to `training` when absent.
    pub tagger: Option<TrainConfig>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            systems: vec![System::Tagger, System::Neighbors, System::Uniform, System::Distance],
            split_ratios: DEFAULT_RATIOS,
            embed_patches: 8,
            autopool_strategy: Strategy::DistanceBased,
            corpus: CorpusConfig::default(),
            oracle: OracleConfig::default(),
            mining: MiningConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            tagger: None,
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("<config>", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&io::read_string(path)?).map_err(|e| Error::parse(path, e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("<config>", e))
    }

    /// The oracle with empty weights expanded to uniform ones.
    pub fn oracle_config(&self) -> OracleConfig {
        if self.oracle.weights.is_empty() {
            OracleConfig::uniform(self.oracle.kind, self.corpus.n_tags)
        } else {
            self.oracle.clone()
        }
    }

    pub fn tagger_training(&self) -> &TrainConfig {
        self.tagger.as_ref().unwrap_or(&self.training)
    }

    /// Model configuration of a trained system.
    pub fn model_for(&self, system: System) -> ModelConfig {
        let mut m = self.model.clone();
        m.input = [self.corpus.patch_freq_bins, self.corpus.patch_frames];
        m.mode = if system == System::Tagger { ModelMode::Tag } else { ModelMode::Embed };
        m.temporal_pool = if system == System::Autopool {
            TemporalPool::Autopool
        } else {
            TemporalPool::Max
        };
        m
    }

    pub fn strategy_for(&self, system: System) -> Option<Strategy> {
        match system {
            System::Neighbors => Some(Strategy::Neighbors),
            System::Uniform => Some(Strategy::RandomUniform),
            System::Distance => Some(Strategy::DistanceBased),
            System::Autopool => Some(self.autopool_strategy),
            System::Tagger | System::Random => None,
        }
    }

    /// Every seed the pipeline uses, by purpose.
    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        let train_base = seed::derive(s, "training", self.training.seed);
        let tag_base = seed::derive(s, "training", self.tagger_training().seed);
        Seeds {
            corpus: seed::derive(s, "corpus", self.corpus.seed),
            split: seed::derive(s, "split", 0),
            mining: seed::derive(s, "mining", self.mining.seed),
            inference: seed::derive(s, "inference", 0),
            training: System::ALL
                .into_iter()
                .filter(|sys| self.systems.contains(sys))
                .map(|sys| {
                    let base = if sys == System::Tagger { tag_base } else { train_base };
                    (sys.key().to_string(), seed::derive(base, sys.key(), 0))
                })
                .collect(),
        }
    }

    /// Checks each section and the constraints between sections.
    pub fn validate(&self) -> Result<()> {
        let m = self.corpus.n_tags;
        self.corpus.validate()?;
        let oracle = self.oracle_config();
        oracle.validate()?;
        if oracle.weights.len() != m {
            return Err(Error::dim("oracle weights vs corpus tags", m, oracle.weights.len()));
        }
        if self.model.n_tags != m {
            return Err(Error::dim("model n_tags vs corpus tags", m, self.model.n_tags));
        }
        let input = [self.corpus.patch_freq_bins, self.corpus.patch_frames];
        if self.model.input != input {
            return Err(Error::invalid(format!(
                "model input {:?} does not match corpus patches {:?}",
                self.model.input, input
            )));
        }
        self.mining.validate()?;
        self.training.validate()?;
        self.tagger_training().validate()?;
        self.eval.validate()?;
        if self.embed_patches == 0 {
            return Err(Error::invalid("embed_patches must be >= 1"));
        }
        if self.systems.is_empty() {
            return Err(Error::invalid("no systems requested"));
        }
        for (i, s) in self.systems.iter().enumerate() {
            if self.systems[..i].contains(s) {
                return Err(Error::invalid(format!("system `{s}` listed twice")));
            }
        }
        let ids: Vec<TrackId> = (0..self.corpus.n_tracks as TrackId).collect();
        let split = split_corpus(&ids, self.split_ratios, 0)?;
        let n_train = split.train.len();
        let (np, nn) = (self.mining.n_positives, self.mining.n_negatives);
        let mines = self.systems.iter().any(|s| self.strategy_for(*s).is_some());
        if mines {
            if np + 1 > n_train.saturating_sub(1) {
                return Err(Error::invalid(format!(
                    "n_positives + 1 = {} exceeds N - 1 = {} on the training split",
                    np + 1,
                    n_train.saturating_sub(1)
                )));
            }
            if nn > n_train - 1 - np {
                return Err(Error::invalid(format!(
                    "n_negatives = {nn} exceeds N - 1 - n_positives = {} on the training split",
                    n_train - 1 - np
                )));
            }
            if split.validation.len() < np + 2 {
                return Err(Error::invalid("validation split too small for n_positives"));
            }
        }
        if self.eval.n_relevant > split.test.len() - 1 {
            return Err(Error::invalid(format!(
                "n_relevant = {} exceeds the {} candidates per test query",
                self.eval.n_relevant,
                split.test.len() - 1
            )));
        }
        for &s in self.systems.iter().filter(|s| s.is_trained()) {
            self.model_for(s).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub corpus: u64,
    pub split: u64,
    pub mining: u64,
    pub inference: u64,
    pub training: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: System,
    pub label: String,
    /// Relative to the output directory.
    pub parameters: Option<String>,
    pub seed: Option<u64>,
    pub map: MetricSummary,
    pub recall: MetricSummary,
    pub rr: MetricSummary,
    pub ndcg: MetricSummary,
    /// Mean-over-tag AUC (tagger only).
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub seeds: Seeds,
    pub config: ExperimentConfig,
    pub k: usize,
    pub rows: Vec<SystemRow>,
    pub loss_curves: BTreeMap<String, TrainReport>,
    pub similarity_profile: Vec<f64>,
}

impl ExperimentReport {
    pub fn row(&self, system: System) -> Option<&SystemRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    /// Aligned text table, means and half-widths x100 with 2 decimals.
    pub fn table(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![std::iter::once("System".to_string())
            .chain(MetricsReport::header(self.k))
            .collect()];
        for r in &self.rows {
            cells.push(
                std::iter::once(r.label.clone())
                    .chain([r.map, r.recall, r.rr, r.ndcg].iter().map(|m| m.to_string()))
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    let pad = w - cell.chars().count();
                    if c == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        for r in &self.rows {
            if let Some(auc) = r.auc {
                writeln!(out, "\n{} mean-over-tag AUC: {auc:.3}", r.label).unwrap();
            }
        }
        out
    }
}

/// Writes `table.txt`, `similarity_profile.tsv`, `loss_<system>.tsv` and
/// `report.json` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let mut missing = Vec::new();
    for &s in &report.config.systems {
        if report.row(s).is_none() {
            missing.push(format!("evaluate-{s}"));
        }
        if s.is_trained() && !report.loss_curves.contains_key(s.key()) {
            missing.push(format!("train-{s}"));
        }
    }
    if report.similarity_profile.is_empty() {
        missing.push("rank".to_string());
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!("report incomplete; missing stages: {}", missing.join(", "))));
    }
    io::write_atomic(&dir.join("table.txt"), report.table().as_bytes())?;
    io::write_atomic(&dir.join("similarity_profile.tsv"), profile_tsv(&report.similarity_profile).as_bytes())?;
    for (key, curve) in &report.loss_curves {
        io::write_atomic(&dir.join(format!("loss_{key}.tsv")), loss_tsv(curve).as_bytes())?;
    }
    io::write_json(&dir.join("report.json"), report)
}

fn profile_tsv(profile: &[f64]) -> String {
    let mut out = String::from("rank\tmean_similarity\n");
    for (i, s) in profile.iter().enumerate() {
        writeln!(out, "{}\t{s:.6}", i + 1).unwrap();
    }
    out
}

/// Epoch 0 is the validation loss before training.
fn loss_tsv(r: &TrainReport) -> String {
    let mut out = String::from("epoch\ttrain\tval\n");
    writeln!(out, "0\t\t{:.6}", r.initial_val_loss).unwrap();
    for (e, (t, v)) in r.train_loss.iter().zip(&r.val_loss).enumerate() {
        writeln!(out, "{}\t{t:.6}\t{v:.6}", e + 1).unwrap();
    }
    out
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

#[derive(Serialize, Deserialize)]
struct Marker {
    hash: String,
    outputs: Vec<String>,
}

/// Split names used for rankings and triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Validation,
    Test,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Validation => "validation",
            Part::Test => "test",
        }
    }

    fn ids(self, split: &Split) -> &[TrackId] {
        match self {
            Part::Train => &split.train,
            Part::Validation => &split.validation,
            Part::Test => &split.test,
        }
    }
}

/// A configured experiment rooted at an output directory.
pub struct Experiment {
    config: ExperimentConfig,
    dir: PathBuf,
}

impl Experiment {
    /// Validates the config before touching the file system.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.out_dir.clone();
        Ok(Experiment { config, dir })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn marker_path(&self, stage: &str) -> PathBuf {
        self.dir.join(".stages").join(format!("{stage}.done"))
    }

    fn failure_path(&self, stage: &str) -> PathBuf {
        self.dir.join(".stages").join(format!("{stage}.failed"))
    }

    pub fn is_complete(&self, stage: &str, hash: &str) -> bool {
        let Ok(m) = io::read_json::<Marker>(&self.marker_path(stage)) else {
            return false;
        };
        m.hash == hash && m.outputs.iter().all(|o| self.dir.join(o).exists())
    }

    fn stage(&self, stage: &str, hash: &str, outputs: &[String], body: impl FnOnce() -> Result<()>) -> Result<()> {
        if self.is_complete(stage, hash) {
            debug!("stage {stage}: up to date");
            return Ok(());
        }
        info!("stage {stage}: running");
        let marker = self.marker_path(stage);
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        let failed = self.failure_path(stage);
        match body() {
            Ok(()) => {
                if let Some(o) = outputs.iter().find(|o| !self.dir.join(o).exists()) {
                    return Err(Error::Stage {
                        stage: stage.to_string(),
                        source: Box::new(Error::State(format!("output {o} was not written"))),
                    });
                }
                if failed.exists() {
                    fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
                }
                io::write_json(
                    &marker,
                    &Marker {
                        hash: hash.to_string(),
                        outputs: outputs.to_vec(),
                    },
                )
            }
            Err(e) => {
                // Outputs written so far stay on disk for inspection.
                let _ = io::write_atomic(&failed, format!("{e}\n").as_bytes());
                Err(Error::Stage {
                    stage: stage.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }

    fn generate_hash(&self) -> String {
        let c = &self.config;
        hash_parts(&[
            "generate",
            VERSION,
            &json(&c.corpus),
            &json(&c.split_ratios),
            &json(&c.seeds()),
            &c.embed_patches.to_string(),
        ])
    }

    fn rank_hash(&self) -> String {
        hash_parts(&["rank", &self.generate_hash(), &json(&self.config.oracle_config())])
    }

    fn mine_hash(&self, s: Strategy) -> String {
        let m = MiningConfig {
            strategy: s,
            ..self.config.mining.clone()
        };
        hash_parts(&["mine", &self.rank_hash(), &json(&m), &self.config.seeds().mining.to_string()])
    }

    fn train_hash(&self, sys: System) -> String {
        let upstream = match self.config.strategy_for(sys) {
            Some(s) => self.mine_hash(s),
            None => self.generate_hash(),
        };
        let cfg = self.train_config(sys);
        hash_parts(&["train", &upstream, &json(&self.config.model_for(sys)), &json(&cfg)])
    }

    fn infer_hash(&self, sys: System) -> String {
        if sys.is_trained() {
            hash_parts(&["infer", &self.train_hash(sys)])
        } else {
            hash_parts(&[
                "infer-random",
                &self.generate_hash(),
                &self.config.model.embedding_dim.to_string(),
            ])
        }
    }

    fn evaluate_hash(&self, sys: System) -> String {
        hash_parts(&["evaluate", &self.infer_hash(sys), &self.rank_hash(), &json(&self.config.eval)])
    }

    fn report_hash(&self) -> String {
        let evals: Vec<String> = self.ordered_systems().into_iter().map(|s| self.evaluate_hash(s)).collect();
        let mut parts = vec!["report", VERSION];
        parts.extend(evals.iter().map(String::as_str));
        let cfg = json(&self.config);
        parts.push(&cfg);
        hash_parts(&parts)
    }

    /// Requested systems in report order.
    pub fn ordered_systems(&self) -> Vec<System> {
        let mut s = self.config.systems.clone();
        s.sort();
        s
    }

    pub fn train_config(&self, sys: System) -> TrainConfig {
        let base = if sys == System::Tagger {
            self.config.tagger_training()
        } else {
            &self.config.training
        };
        TrainConfig {
            seed: self.config.seeds().training.get(sys.key()).copied().unwrap_or(base.seed),
            ..base.clone()
        }
    }

    pub fn generate(&self) -> Result<()> {
        let outputs = [
            "corpus/manifest.json",
            "corpus/prototypes.f32",
            "corpus/prototypes.json",
            "corpus/tags.jsonl",
            "corpus/split.json",
            "corpus/eval_patches.f32",
            "corpus/eval_patches.json",
        ]
        .map(String::from);
        self.stage("generate", &self.generate_hash(), &outputs, || {
            let seeds = self.config.seeds();
            let corpus = generate_corpus(&CorpusConfig {
                seed: seeds.corpus,
                ..self.config.corpus.clone()
            })?;
            let ids: Vec<TrackId> = corpus.ids().collect();
            let split = split_corpus(&ids, self.config.split_ratios, seeds.split)?;
            let dir = self.path("corpus");
            io::write_corpus(&dir, &corpus)?;
            io::write_tag_table(&dir.join("tags.jsonl"), &corpus.tag_table())?;
            io::write_json(&dir.join("split.json"), &split)?;
            let mut patches = Vec::new();
            for &id in &split.test {
                for (i, p) in corpus
                    .patches(id, self.config.embed_patches, seeds.inference)?
                    .into_iter()
                    .enumerate()
                {
                    patches.push((
                        io::PatchRecord {
                            track: Some(id),
                            index: i,
                            freq_bins: p.freq_bins,
                            frames: p.frames,
                        },
                        p,
                    ));
                }
            }
            let refs: Vec<(io::PatchRecord, &crate::corpus::Patch)> =
                patches.iter().map(|(r, p)| (r.clone(), p)).collect();
            io::write_patches(&dir.join("eval_patches"), &refs)
        })
    }

    pub fn corpus(&self) -> Result<Corpus> {
        io::read_corpus(&self.path("corpus"))
    }

    pub fn split(&self) -> Result<Split> {
        io::read_json(&self.path("corpus/split.json"))
    }

    pub fn rank(&self) -> Result<()> {
        self.generate()?;
        let outputs = [
            "rankings/train.jsonl",
            "rankings/validation.jsonl",
            "rankings/test.jsonl",
            "rankings/profile.tsv",
        ]
        .map(String::from);
        self.stage("rank", &self.rank_hash(), &outputs, || {
            let tags = io::read_tag_table(&self.path("corpus/tags.jsonl"))?;
            let split = self.split()?;
            let oracle = self.config.oracle_config();
            for part in [Part::Train, Part::Validation, Part::Test] {
                let sub = part
                    .ids(&split)
                    .iter()
                    .map(|id| tags.get(id).map(|t| (*id, t.clone())).ok_or(Error::UnknownTrack(*id)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                let r = rank_all(&sub, &oracle)?;
                io::write_rankings(&self.path(&format!("rankings/{}.jsonl", part.name())), &r)?;
            }
            let profile = similarity_profile(&rank_all(&tags, &oracle)?)?;
            io::write_atomic(&self.path("rankings/profile.tsv"), profile_tsv(&profile).as_bytes())
        })
    }

    pub fn rankings(&self, part: Part) -> Result<Vec<RankedList>> {
        io::read_rankings(&self.path(&format!("rankings/{}.jsonl", part.name())))
    }

    pub fn similarity_profile(&self) -> Result<Vec<f64>> {
        let path = self.path("rankings/profile.tsv");
        io::read_string(&path)?
            .lines()
            .skip(1)
            .map(|l| {
                l.split('\t')
                    .nth(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::parse(&path, format!("bad row `{l}`")))
            })
            .collect()
    }

    fn triplet_path(s: Strategy, part: Part) -> String {
        format!("triplets/{s}-{}.tsv", part.name())
    }

    pub fn mine(&self, s: Strategy) -> Result<()> {
        self.rank()?;
        let outputs = [Self::triplet_path(s, Part::Train), Self::triplet_path(s, Part::Validation)];
        self.stage(&format!("mine-{s}"), &self.mine_hash(s), &outputs, || {
            let cfg = MiningConfig {
                strategy: s,
                seed: self.config.seeds().mining,
                ..self.config.mining.clone()
            };
            let train = mine_triplets(&self.rankings(Part::Train)?, &cfg)?;
            io::write_triplets(&self.path(&outputs[0]), &train, s)?;
            let val_rankings = self.rankings(Part::Validation)?;
            let len = val_rankings.first().map_or(0, RankedList::len);
            let val = mine_triplets(&val_rankings, &cfg.capped_to(len))?;
            io::write_triplets(&self.path(&outputs[1]), &val, s)
        })
    }

    pub fn triplets(&self, s: Strategy, part: Part) -> Result<Vec<Triplet>> {
        Ok(io::read_triplets(&self.path(&Self::triplet_path(s, part)))?.0)
    }

    fn model_stem(sys: System) -> String {
        format!("models/{}/params", sys.key())
    }

    pub fn train(&self, sys: System) -> Result<()> {
        if !sys.is_trained() {
            return Err(Error::invalid(format!("system `{sys}` is not trained")));
        }
        match self.config.strategy_for(sys) {
            Some(s) => self.mine(s)?,
            None => self.generate()?,
        }
        let stem = Self::model_stem(sys);
        let dir = format!("models/{}", sys.key());
        let outputs = [
            format!("{stem}.json"),
            format!("{stem}.f32"),
            format!("{dir}/train_report.json"),
            format!("{dir}/loss.tsv"),
        ];
        self.stage(&format!("train-{sys}"), &self.train_hash(sys), &outputs, || {
            let corpus = self.corpus()?;
            let net = Network::new(self.config.model_for(sys))?;
            let cfg = self.train_config(sys);
            let (params, report) = match self.config.strategy_for(sys) {
                Some(s) => {
                    let tr = self.triplets(s, Part::Train)?;
                    let va = self.triplets(s, Part::Validation)?;
                    train(
                        &net,
                        &corpus,
                        TrainingData::Triplets {
                            train: &tr,
                            validation: &va,
                        },
                        &cfg,
                    )?
                }
                None => {
                    let split = self.split()?;
                    train(
                        &net,
                        &corpus,
                        TrainingData::Tags {
                            train: &split.train,
                            validation: &split.validation,
                        },
                        &cfg,
                    )?
                }
            };
            io::write_parameters(&self.path(&stem), &net, &params)?;
            io::write_json(&self.path(&outputs[2]), &report)?;
            io::write_atomic(&self.path(&outputs[3]), loss_tsv(&report).as_bytes())
        })
    }

    pub fn train_report(&self, sys: System) -> Result<TrainReport> {
        io::read_json(&self.path(&format!("models/{}/train_report.json", sys.key())))
    }

    fn output_path(sys: System) -> String {
        format!("outputs/{}.jsonl", sys.key())
    }

    /// Track-level embeddings (or tag estimates for the tagger) of the test
    /// split, averaged over the stored evaluation patches.
    pub fn infer(&self, sys: System) -> Result<()> {
        if sys.is_trained() {
            self.train(sys)?;
        } else {
            self.generate()?;
        }
        let outputs = [Self::output_path(sys)];
        self.stage(&format!("infer-{sys}"), &self.infer_hash(sys), &outputs, || {
            let split = self.split()?;
            let table: BTreeMap<TrackId, Vec<f64>> = if sys.is_trained() {
                let (net, params) = io::read_parameters(&self.path(&Self::model_stem(sys)))?;
                let mut by_track: BTreeMap<TrackId, Vec<crate::corpus::Patch>> = BTreeMap::new();
                for (rec, p) in io::read_patches(&self.path("corpus/eval_patches"))? {
                    let id = rec
                        .track
                        .ok_or_else(|| Error::State("evaluation patch without a track id".into()))?;
                    by_track.entry(id).or_default().push(p);
                }
                split
                    .test
                    .iter()
                    .map(|id| {
                        let patches = by_track.get(id).ok_or(Error::UnknownTrack(*id))?;
                        Ok((*id, net.mean_output(&params, patches)?))
                    })
                    .collect::<Result<_>>()?
            } else {
                random_embeddings(&split.test, self.config.model.embedding_dim, self.config.seeds().inference)
            };
            io::write_vectors(&self.path(&outputs[0]), &table)
        })
    }

    pub fn outputs(&self, sys: System) -> Result<BTreeMap<TrackId, Vec<f64>>> {
        io::read_vectors(&self.path(&Self::output_path(sys)))
    }

    fn metrics_path(sys: System) -> String {
        format!("metrics/{}.json", sys.key())
    }

    pub fn evaluate(&self, sys: System) -> Result<()> {
        self.infer(sys)?;
        self.rank()?;
        let outputs = [Self::metrics_path(sys), format!("metrics/{}.txt", sys.key())];
        self.stage(&format!("evaluate-{sys}"), &self.evaluate_hash(sys), &outputs, || {
            let out = self.outputs(sys)?;
            let truth = self.rankings(Part::Test)?;
            let oracle = self.config.oracle_config();
            let (metrics, auc) = if sys == System::Tagger {
                let tags = io::read_tag_table(&self.path("corpus/tags.jsonl"))?;
                let threshold = self.config.tagger_training().binarize_threshold;
                let mut est = Vec::with_capacity(out.len());
                let mut bin = Vec::with_capacity(out.len());
                for (id, v) in &out {
                    est.push(v.clone());
                    bin.push(binarize_tags(tags.get(id).ok_or(Error::UnknownTrack(*id))?, threshold));
                }
                let auc = mean_auc(&est, &bin)?.mean;
                let m = evaluate_system(&SystemOutput::TagEstimates(out), &truth, &self.config.eval, &oracle)?;
                (m, Some(auc))
            } else {
                (
                    evaluate_system(&SystemOutput::Embeddings(out), &truth, &self.config.eval, &oracle)?,
                    None,
                )
            };
            let record = SystemMetrics { metrics, auc };
            io::write_json(&self.path(&outputs[0]), &record)?;
            io::write_atomic(&self.path(&outputs[1]), record.table().as_bytes())
        })
    }

    pub fn metrics(&self, sys: System) -> Result<SystemMetrics> {
        io::read_json(&self.path(&Self::metrics_path(sys)))
    }

    /// Assembles the report from persisted stage outputs.
    pub fn collect_report(&self) -> Result<ExperimentReport> {
        let seeds = self.config.seeds();
        let mut rows = Vec::new();
        let mut loss_curves = BTreeMap::new();
        for sys in self.ordered_systems() {
            let m = self.metrics(sys)?;
            if sys.is_trained() {
                loss_curves.insert(sys.key().to_string(), self.train_report(sys)?);
            }
            rows.push(SystemRow {
                system: sys,
                label: sys.label().to_string(),
                parameters: sys.is_trained().then(|| format!("{}.f32", Self::model_stem(sys))),
                seed: Some(seeds.training.get(sys.key()).copied().unwrap_or(seeds.inference)),
                map: m.metrics.map,
                recall: m.metrics.recall,
                rr: m.metrics.rr,
                ndcg: m.metrics.ndcg,
                auc: m.auc,
            });
        }
        Ok(ExperimentReport {
            version: VERSION.to_string(),
            seeds,
            config: self.config.clone(),
            k: self.config.eval.k,
            rows,
            loss_curves,
            similarity_profile: self.similarity_profile()?,
        })
    }

    pub fn report(&self) -> Result<ExperimentReport> {
        for sys in self.ordered_systems() {
            self.evaluate(sys)?;
        }
        let outputs = [
            "report/report.json",
            "report/table.txt",
            "report/similarity_profile.tsv",
        ]
        .map(String::from);
        self.stage("report", &self.report_hash(), &outputs, || {
            emit_report(&self.collect_report()?, &self.path("report"))
        })?;
        io::read_json(&self.path("report/report.json"))
    }

    /// Runs every stage still missing or stale.
    pub fn run(&self) -> Result<ExperimentReport> {
        io::write_atomic(&self.path("config.toml"), self.config.to_toml()?.as_bytes())?;
        self.report()
    }
}

/// Evaluation record of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub metrics: MetricsReport,
    pub auc: Option<f64>,
}

impl SystemMetrics {
    /// `metric  mean  ci` rows.
    pub fn table(&self) -> String {
        let mut out = String::from("metric\tmean\tci\n");
        for (name, m) in MetricsReport::header(self.metrics.k).iter().zip(self.metrics.columns()) {
            writeln!(out, "{name}\t{:.2}\t{:.2}", m.mean, m.half_width).unwrap();
        }
        if let Some(a) = self.auc {
            writeln!(out, "AUC\t{a:.4}\t").unwrap();
        }
        out
    }
}

/// Gaussian vectors scaled to unit length, one stream per track.
pub fn random_embeddings(ids: &[TrackId], dim: usize, seed: u64) -> BTreeMap<TrackId, Vec<f64>> {
    ids.iter()
        .map(|&id| {
            let mut rng = seed::derived_rng(seed, "random-embedding", u64::from(id));
            loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    return (id, v.into_iter().map(|x| x / n).collect());
                }
            }
        })
        .collect()
}

/// Validates `config` and runs the whole pipeline in `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    Experiment::new(config.clone())?.run()
}
