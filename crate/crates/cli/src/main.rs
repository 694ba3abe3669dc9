use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::LevelFilter;

use tripletrank::eval::EvalConfig;
use tripletrank::experiment::{Experiment, ExperimentConfig, Part, System};
use tripletrank::mining::Strategy;
use tripletrank::{io, Result};

#[derive(Parser, Debug)]
#[command(name = "tripletrank", version, about = "Metric learning to rank from tag-based similarity")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; every stage derives its randomness from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Triplet,
    Tagger,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Pool {
    Max,
    Autopool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Neighbors,
    Uniform,
    Distance,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Neighbors => Strategy::Neighbors,
            StrategyArg::Uniform => Strategy::RandomUniform,
            StrategyArg::Distance => Strategy::DistanceBased,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, its split and the evaluation patches.
    Generate,
    /// Rank every split by oracle similarity.
    Rank,
    /// Mine triplets from the training and validation rankings.
    Mine {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long = "np")]
        n_positives: Option<usize>,
        #[arg(long = "nn")]
        n_negatives: Option<usize>,
    },
    /// Train a triplet network or a tagger.
    Train {
        #[arg(long, value_enum, default_value = "triplet")]
        mode: Mode,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, value_enum, default_value = "max")]
        pool: Pool,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Write per-track embeddings of the test split.
    Embed {
        #[arg(long, default_value = "distance")]
        system: System,
    },
    /// Write per-track tag estimates of the test split.
    EstimateTags,
    /// Score one system against the test rankings.
    Evaluate {
        #[arg(long, default_value = "distance")]
        system: System,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        relevant: Option<usize>,
    },
    /// Evaluate every configured system and write the report.
    Report,
    /// Write the mean similarity per rank over the whole corpus.
    ProfileSimilarity,
    /// Run every stage of the configured experiment.
    Run,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Rank => "rank",
            Command::Mine { .. } => "mine",
            Command::Train { .. } => "train",
            Command::Embed { .. } => "embed",
            Command::EstimateTags => "estimate-tags",
            Command::Evaluate { .. } => "evaluate",
            Command::Report => "report",
            Command::ProfileSimilarity => "profile-similarity",
            Command::Run => "run",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let exp = Experiment::new(cfg)?;
            exp.generate()?;
            println!("{}", exp.path("corpus").display());
        }
        Command::Rank => {
            let exp = Experiment::new(cfg)?;
            exp.rank()?;
            println!("{}", exp.path("rankings").display());
        }
        Command::Mine {
            strategy,
            n_positives,
            n_negatives,
        } => {
            if let Some(n) = n_positives {
                cfg.mining.n_positives = *n;
            }
            if let Some(n) = n_negatives {
                cfg.mining.n_negatives = *n;
            }
            let s = strategy.map_or(cfg.mining.strategy, Strategy::from);
            let exp = Experiment::new(cfg)?;
            exp.mine(s)?;
            for part in [Part::Train, Part::Validation] {
                let n = exp.triplets(s, part)?.len();
                println!("{}\t{n} triplets", exp.path(&format!("triplets/{s}-{}.tsv", part.name())).display());
            }
        }
        Command::Train {
            mode,
            strategy,
            pool,
            margin,
            lr,
            batch,
            patience,
            max_epochs,
        } => {
            let system = match (mode, pool) {
                (Mode::Tagger, _) => System::Tagger,
                (Mode::Triplet, Pool::Autopool) => {
                    cfg.autopool_strategy = strategy.map_or(cfg.autopool_strategy, Strategy::from);
                    System::Autopool
                }
                (Mode::Triplet, Pool::Max) => match strategy.map_or(cfg.mining.strategy, Strategy::from) {
                    Strategy::Neighbors => System::Neighbors,
                    Strategy::RandomUniform => System::Uniform,
                    Strategy::DistanceBased => System::Distance,
                },
            };
            let tc = if system == System::Tagger {
                cfg.tagger.get_or_insert_with(|| cfg.training.clone())
            } else {
                &mut cfg.training
            };
            if let Some(v) = margin {
                tc.margin = *v;
            }
            if let Some(v) = lr {
                tc.learning_rate = *v;
            }
            if let Some(v) = batch {
                tc.batch_triplets = *v;
            }
            if let Some(v) = patience {
                tc.patience = *v;
            }
            if let Some(v) = max_epochs {
                tc.max_epochs = *v;
            }
            if !cfg.systems.contains(&system) {
                cfg.systems.push(system);
            }
            let exp = Experiment::new(cfg)?;
            exp.train(system)?;
            let r = exp.train_report(system)?;
            println!(
                "{}: best epoch {} of {}, validation loss {:.6}",
                system.label(),
                r.best_epoch,
                r.stopped_epoch,
                r.best_val_loss()
            );
            println!("{}", exp.path(&format!("models/{}/params.f32", system.key())).display());
        }
        Command::Embed { system } => {
            if *system == System::Tagger {
                return Err(tripletrank::Error::Validation(
                    "the tagger produces tag estimates; use estimate-tags".into(),
                ));
            }
            infer(cfg, *system)?;
        }
        Command::EstimateTags => infer(cfg, System::Tagger)?,
        Command::Evaluate { system, k, relevant } => {
            if k.is_some() || relevant.is_some() {
                let k = k.unwrap_or(cfg.eval.k);
                let rel = relevant.unwrap_or(cfg.eval.n_relevant);
                if rel != cfg.eval.n_relevant {
                    cfg.eval = EvalConfig::new(k, rel);
                } else {
                    cfg.eval.k = k;
                }
            }
            if !cfg.systems.contains(system) {
                cfg.systems.push(*system);
            }
            let exp = Experiment::new(cfg)?;
            exp.evaluate(*system)?;
            print!("{}", exp.metrics(*system)?.table());
        }
        Command::Report => {
            let exp = Experiment::new(cfg)?;
            exp.report()?;
            print!("{}", io::read_string(&exp.path("report/table.txt"))?);
        }
        Command::ProfileSimilarity => {
            let exp = Experiment::new(cfg)?;
            exp.rank()?;
            print!("{}", io::read_string(&exp.path("rankings/profile.tsv"))?);
        }
        Command::Run => {
            let exp = Experiment::new(cfg)?;
            let report = exp.run()?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn infer(mut cfg: ExperimentConfig, system: System) -> Result<()> {
    if !cfg.systems.contains(&system) {
        cfg.systems.push(system);
    }
    let exp = Experiment::new(cfg)?;
    exp.infer(system)?;
    println!("{}", exp.path(&format!("outputs/{}.jsonl", system.key())).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tripletrank {}: {e}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
