use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
systems = ["tagger", "distance", "random"]
embed_patches = 2

[corpus]
n_tracks = 30
n_tags = 6
patch_freq_bins = 8
patch_frames = 8
tags_per_track = [1, 3]

[mining]
n_positives = 2
n_negatives = 3

[model]
input = [8, 8]
embedding_dim = 4
n_tags = 6
layers = [{ kernel = [3, 3], channels = 3, pool = [2, 2] }]

[training]
batch_triplets = 3
max_epochs = 2

[eval]
k = 4
n_relevant = 2
gains = [2.0, 1.0]
"#;

fn tripletrank(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_tripletrank"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_prints_report_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = tripletrank(dir.path(), &["run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let header = out.lines().next().unwrap();
    for col in ["MAP@4", "Recall@4", "RR@4", "nDCG@4"] {
        assert!(header.contains(col), "{out}");
    }
    let rows: Vec<&str> = out.lines().filter(|l| l.contains(" ± ")).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("AT "));
    assert!(rows[1].starts_with("TL Distance-based"));
    assert!(out.contains("mean-over-tag AUC"));
    for f in ["report/report.json", "report/similarity_profile.tsv", "report/loss_distance.tsv", "config.toml"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }

    // A second run reuses every stage and prints the same table.
    let again = tripletrank(dir.path(), &["run"]);
    assert_eq!(stdout(&again), out);
}

#[test]
fn stage_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let ok = |args: &[&str]| {
        let o = tripletrank(dir.path(), args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    ok(&["generate"]);
    assert!(out.join("corpus/manifest.json").exists());
    assert!(out.join("corpus/eval_patches.f32").exists());
    ok(&["rank"]);
    let mined = ok(&["mine", "--strategy", "uniform", "--np", "2", "--nn", "3"]);
    // 18 training tracks x 2 positives x 3 negatives
    assert!(mined.contains("108 triplets"), "{mined}");
    let header = fs::read_to_string(out.join("triplets/uniform-train.tsv")).unwrap();
    assert!(header.starts_with("anchor\tpositive\tnegative\ti\tj\tstrategy\n"));

    let trained = ok(&["train", "--mode", "triplet", "--strategy", "uniform", "--lr", "0.002", "--max-epochs", "2"]);
    assert!(trained.contains("TL Random uniform"), "{trained}");
    assert!(out.join("models/uniform/params.json").exists());
    let loss = fs::read_to_string(out.join("models/uniform/loss.tsv")).unwrap();
    assert!(loss.starts_with("epoch\ttrain\tval\n"));

    ok(&["train", "--mode", "tagger", "--max-epochs", "1"]);
    ok(&["estimate-tags"]);
    assert!(out.join("outputs/tagger.jsonl").exists());
    ok(&["embed", "--system", "random"]);
    let first = fs::read_to_string(out.join("outputs/random.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 6);

    let metrics = ok(&["evaluate", "--system", "random", "--k", "5", "--relevant", "2"]);
    assert!(metrics.contains("MAP@5"), "{metrics}");

    let profile = ok(&["profile-similarity"]);
    let values: Vec<f64> = profile
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 29);
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn errors_exit_nonzero_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, SMALL.replace("n_tags = 6\nlayers", "n_tags = 5\nlayers")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tripletrank"))
        .args(["--config", bad.to_str().unwrap(), "--out"])
        .arg(dir.path().join("bad"))
        .arg("run")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("tripletrank run"), "{}", stderr(&o));
    assert!(!dir.path().join("bad").exists(), "no work before validation");

    assert!(tripletrank(dir.path(), &["rank"]).status.success());
    fs::write(dir.path().join("out/rankings/train.jsonl"), "garbage\n").unwrap();
    let o = tripletrank(dir.path(), &["mine", "--strategy", "distance"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `mine-distance`"), "{}", stderr(&o));
    assert!(dir.path().join("out/.stages/mine-distance.failed").exists());

    let o = tripletrank(dir.path(), &["mine", "--strategy", "sideways"]);
    assert!(!o.status.success());
}
