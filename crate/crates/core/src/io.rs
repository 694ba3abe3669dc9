//! On-disk formats.
//!
//! * vectors (tags, embeddings, tag estimates): JSON lines `{"id":..,"values":[..]}`
//! * rankings: JSON lines `{"query":..,"ranking":[[id,score],..]}`, scores with 6 decimals
//! * triplets: tab-separated `anchor positive negative i j strategy` with a header row
//! * parameters: JSON header plus a flat little-endian `f32` array
//! * corpus: JSON manifest plus little-endian `f32` patch arrays, each with a JSON sidecar
//!
//! Every writer goes through [`write_atomic`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusConfig, Patch, Track};
use crate::error::{Error, Result};
use crate::mining::{Strategy, Triplet};
use crate::net::{Block, ModelConfig, Network, Parameters};
use crate::oracle::{RankedList, TagVector, TrackId};

/// Writes through a temporary sibling and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::parse(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1))))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct VectorRecord {
    id: TrackId,
    values: Vec<f64>,
}

/// One record per track, ascending id.
pub fn write_vectors(path: &Path, table: &BTreeMap<TrackId, Vec<f64>>) -> Result<()> {
    let mut out = String::new();
    for (&id, values) in table {
        let rec = serde_json::to_string(&VectorRecord {
            id,
            values: values.clone(),
        })
        .map_err(|e| Error::parse(path, e))?;
        out.push_str(&rec);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_vectors(path: &Path) -> Result<BTreeMap<TrackId, Vec<f64>>> {
    let mut table = BTreeMap::new();
    for rec in read_jsonl::<VectorRecord>(path)? {
        if table.insert(rec.id, rec.values).is_some() {
            return Err(Error::parse(path, format!("duplicate id {}", rec.id)));
        }
    }
    Ok(table)
}

pub fn write_tag_table(path: &Path, table: &BTreeMap<TrackId, TagVector>) -> Result<()> {
    write_vectors(
        path,
        &table.iter().map(|(&id, t)| (id, t.values().to_vec())).collect(),
    )
}

pub fn read_tag_table(path: &Path) -> Result<BTreeMap<TrackId, TagVector>> {
    read_vectors(path)?
        .into_iter()
        .map(|(id, v)| Ok((id, TagVector::new(v).map_err(|e| Error::parse(path, e))?)))
        .collect()
}

#[derive(Deserialize)]
struct RankingRecord {
    query: TrackId,
    ranking: Vec<(TrackId, f64)>,
}

pub fn write_rankings(path: &Path, rankings: &[RankedList]) -> Result<()> {
    let mut out = String::new();
    for r in rankings {
        write!(out, "{{\"query\":{},\"ranking\":[", r.query).unwrap();
        for (n, (id, score)) in r.entries.iter().enumerate() {
            if n > 0 {
                out.push(',');
            }
            write!(out, "[{id},{score:.6}]").unwrap();
        }
        out.push_str("]}\n");
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_rankings(path: &Path) -> Result<Vec<RankedList>> {
    Ok(read_jsonl::<RankingRecord>(path)?
        .into_iter()
        .map(|r| RankedList {
            query: r.query,
            entries: r.ranking,
        })
        .collect())
}

const TRIPLET_HEADER: &str = "anchor\tpositive\tnegative\ti\tj\tstrategy";

pub fn write_triplets(path: &Path, triplets: &[Triplet], strategy: Strategy) -> Result<()> {
    let mut out = String::with_capacity(triplets.len() * 24);
    out.push_str(TRIPLET_HEADER);
    out.push('\n');
    for t in triplets {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            t.anchor, t.positive, t.negative, t.positive_rank, t.negative_rank, strategy
        )
        .unwrap();
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_triplets(path: &Path) -> Result<(Vec<Triplet>, Option<Strategy>)> {
    let text = read_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRIPLET_HEADER) {
        return Err(Error::parse(path, "missing triplet header"));
    }
    let mut strategy = None;
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = |m: &str| Error::parse(path, format!("line {}: {m}", n + 2));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let s: Strategy = f[5].parse().map_err(|_| bad("bad strategy"))?;
        if strategy.is_some_and(|prev| prev != s) {
            return Err(bad("mixed strategies"));
        }
        strategy = Some(s);
        out.push(Triplet {
            anchor: num(f[0])? as TrackId,
            positive: num(f[1])? as TrackId,
            negative: num(f[2])? as TrackId,
            positive_rank: num(f[3])?,
            negative_rank: num(f[4])?,
        });
    }
    Ok((out, strategy))
}

pub fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(path, "length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// `params.json` next to `params.f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub model: ModelConfig,
    pub n_params: usize,
    pub blocks: Vec<Block>,
    pub alpha: Vec<f64>,
    pub data: String,
}

/// Writes `<stem>.json` and `<stem>.f32`. Values are stored as `f32`.
pub fn write_parameters(stem: &Path, net: &Network, params: &Parameters) -> Result<()> {
    if params.values.len() != net.n_params() {
        return Err(Error::dim("parameters", net.n_params(), params.values.len()));
    }
    let data = stem.with_extension("f32");
    let header = ParamsHeader {
        model: net.config().clone(),
        n_params: net.n_params(),
        blocks: net.blocks(),
        alpha: net.alpha_values(params).iter().map(|&a| f64::from(a as f32)).collect(),
        data: data
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    write_f32(&data, &params.values)?;
    write_json(&stem.with_extension("json"), &header)
}

pub fn read_parameters(stem: &Path) -> Result<(Network, Parameters)> {
    let header_path = stem.with_extension("json");
    let header: ParamsHeader = read_json(&header_path)?;
    let net = Network::new(header.model)?;
    if net.n_params() != header.n_params || net.blocks() != header.blocks {
        return Err(Error::parse(&header_path, "block layout does not match the model config"));
    }
    let values = read_f32(&stem.with_extension("f32"))?;
    if values.len() != net.n_params() {
        return Err(Error::dim("parameter file", net.n_params(), values.len()));
    }
    Ok((net, Parameters { values }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub track: Option<TrackId>,
    pub index: usize,
    pub freq_bins: usize,
    pub frames: usize,
}

/// Writes `<stem>.f32` with a `<stem>.json` sidecar listing each patch.
pub fn write_patches(stem: &Path, patches: &[(PatchRecord, &Patch)]) -> Result<()> {
    let mut values = Vec::new();
    let mut sidecar = Vec::with_capacity(patches.len());
    for (rec, p) in patches {
        if (rec.freq_bins, rec.frames) != (p.freq_bins, p.frames) {
            return Err(Error::dim("patch record", rec.freq_bins * rec.frames, p.values.len()));
        }
        values.extend_from_slice(&p.values);
        sidecar.push(rec.clone());
    }
    write_f32(&stem.with_extension("f32"), &values)?;
    write_json(&stem.with_extension("json"), &sidecar)
}

pub fn read_patches(stem: &Path) -> Result<Vec<(PatchRecord, Patch)>> {
    let sidecar: Vec<PatchRecord> = read_json(&stem.with_extension("json"))?;
    let data_path = stem.with_extension("f32");
    let values = read_f32(&data_path)?;
    let total: usize = sidecar.iter().map(|r| r.freq_bins * r.frames).sum();
    if total != values.len() {
        return Err(Error::dim("patch data", total, values.len()));
    }
    let mut at = 0;
    sidecar
        .into_iter()
        .map(|rec| {
            let len = rec.freq_bins * rec.frames;
            let p = Patch::from_values(rec.freq_bins, rec.frames, values[at..at + len].to_vec())?;
            at += len;
            Ok((rec, p))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    config: CorpusConfig,
    tracks: Vec<Track>,
    prototypes: String,
}

/// Writes `manifest.json` and `prototypes.{f32,json}` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let protos: Vec<(PatchRecord, &Patch)> = corpus
        .prototypes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                PatchRecord {
                    track: None,
                    index: i,
                    freq_bins: p.freq_bins,
                    frames: p.frames,
                },
                p,
            )
        })
        .collect();
    write_patches(&dir.join("prototypes"), &protos)?;
    write_json(
        &dir.join("manifest.json"),
        &CorpusManifest {
            config: corpus.config.clone(),
            tracks: corpus.tracks.clone(),
            prototypes: "prototypes.f32".into(),
        },
    )
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let m: CorpusManifest = read_json(&path)?;
    m.config.validate()?;
    let prototypes: Vec<Patch> = read_patches(&dir.join("prototypes"))?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    if prototypes.len() != m.config.n_tags {
        return Err(Error::dim("corpus prototypes", m.config.n_tags, prototypes.len()));
    }
    if let Some(t) = m.tracks.iter().find(|t| t.tags.len() != m.config.n_tags) {
        return Err(Error::parse(&path, format!("track {} has {} tags", t.id, t.tags.len())));
    }
    Ok(Corpus {
        config: m.config,
        tracks: m.tracks,
        prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;
    use crate::net::{ConvSpec, ModelMode, TemporalPool};
    use crate::oracle::{rank_all, OracleConfig, OracleKind};

    fn small_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            n_tracks: 12,
            n_tags: 5,
            patch_freq_bins: 6,
            patch_frames: 8,
            tags_per_track: [1, 3],
            noise_sigma: 0.05,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn vectors_and_tags_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_corpus();
        let path = dir.path().join("tags.jsonl");
        write_tag_table(&path, &c.tag_table()).unwrap();
        assert_eq!(read_tag_table(&path).unwrap(), c.tag_table());
        let first = read_string(&path).unwrap();
        assert!(first.starts_with("{\"id\":0,\"values\":["));
        fs::write(&path, "{\"id\":1,\"values\":[0.5]}\n{\"id\":1,\"values\":[0.5]}\n").unwrap();
        assert!(read_vectors(&path).is_err());
        fs::write(&path, "{\"id\":1,\"values\":[1.5]}\n").unwrap();
        assert!(read_tag_table(&path).is_err());
    }

    #[test]
    fn rankings_keep_six_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_corpus();
        let r = rank_all(&c.tag_table(), &OracleConfig::uniform(OracleKind::WeightedJaccard, 5)).unwrap();
        let path = dir.path().join("r.jsonl");
        write_rankings(&path, &r).unwrap();
        let back = read_rankings(&path).unwrap();
        assert_eq!(back.len(), r.len());
        for (a, b) in r.iter().zip(&back) {
            assert_eq!(a.query, b.query);
            assert_eq!(a.ids().collect::<Vec<_>>(), b.ids().collect::<Vec<_>>());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                assert!((x.1 - y.1).abs() <= 5e-7);
            }
        }
        let line = read_string(&path).unwrap().lines().next().unwrap().to_string();
        let first = &line[line.find("[[").unwrap() + 2..];
        let score = first[..first.find(']').unwrap()].split(',').nth(1).unwrap();
        assert_eq!(score.split('.').nth(1).unwrap().len(), 6, "{line}");
    }

    #[test]
    fn triplets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = vec![
            Triplet {
                anchor: 3,
                positive: 4,
                negative: 9,
                positive_rank: 1,
                negative_rank: 7,
            },
            Triplet {
                anchor: 3,
                positive: 5,
                negative: 1,
                positive_rank: 2,
                negative_rank: 3,
            },
        ];
        let path = dir.path().join("t.tsv");
        write_triplets(&path, &t, Strategy::RandomUniform).unwrap();
        assert_eq!(read_triplets(&path).unwrap(), (t, Some(Strategy::RandomUniform)));
        assert!(read_string(&path).unwrap().contains("3\t4\t9\t1\t7\tuniform\n"));
        fs::write(&path, "anchor\tpositive\n").unwrap();
        assert!(read_triplets(&path).is_err());
    }

    #[test]
    fn parameters_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(ModelConfig {
            mode: ModelMode::Embed,
            input: [6, 8],
            layers: vec![ConvSpec::new([3, 3], 3, [2, 2])],
            embedding_dim: 4,
            n_tags: 5,
            temporal_pool: TemporalPool::Autopool,
            autopool_shared: false,
        })
        .unwrap();
        let p = net.init_params(1);
        let stem = dir.path().join("model/params");
        write_parameters(&stem, &net, &p).unwrap();
        let (net2, p2) = read_parameters(&stem).unwrap();
        assert_eq!(net2.config(), net.config());
        for (a, b) in p.values.iter().zip(&p2.values) {
            assert_eq!(*b, f64::from(*a as f32));
        }
        // A second round trip is exact.
        write_parameters(&stem, &net2, &p2).unwrap();
        assert_eq!(read_parameters(&stem).unwrap().1, p2);
        let header: ParamsHeader = read_json(&stem.with_extension("json")).unwrap();
        assert_eq!(header.alpha.len(), 4);
        fs::write(stem.with_extension("f32"), [0u8; 8]).unwrap();
        assert!(read_parameters(&stem).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_corpus();
        write_corpus(dir.path(), &c).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.tracks, c.tracks);
        assert_eq!(back.config, c.config);
        for (a, b) in c.prototypes.iter().zip(&back.prototypes) {
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        assert!(!dir.path().join("manifest.json.tmp").exists());
    }
}
