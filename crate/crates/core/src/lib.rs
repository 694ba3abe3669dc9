//! Metric learning to rank over tag-based similarity.
//!
//! Ground-truth rankings come from an oracle similarity over tag vectors.
//! Triplets are mined from those rankings, a small convolutional network is
//! trained on them, and retrieval quality is measured with MAP, Recall, RR
//! and nDCG at a cutoff.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod mining;
pub mod net;
pub mod oracle;
pub mod seed;
pub mod train;

pub use corpus::{generate_corpus, split_corpus, Corpus, CorpusConfig, Patch, Split, Track};
pub use error::{Error, Result};
pub use experiment::{emit_report, run_experiment, Experiment, ExperimentConfig, ExperimentReport, System};
pub use eval::{evaluate_system, EvalConfig, MetricSummary, MetricsReport, RetrievalResult, SystemOutput};
pub use mining::{group_triplets, mine_triplets, MiningConfig, Strategy, Triplet, TripletGroup};
pub use net::{ModelConfig, ModelMode, Network, Parameters, TemporalPool};
pub use oracle::{oracle_similarity, rank_all, rank_by_similarity, OracleConfig, OracleKind, RankedList, TagVector, TrackId};
pub use train::{train, TrainConfig, TrainReport, TrainingData};
