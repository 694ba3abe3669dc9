//! Synthetic corpus: tag-likelihood vectors plus feature patches whose content
//! is a function of the tags, and the train/validation/test split.
//!
//! Each tag owns a fixed prototype pattern: a couple of Gaussian bumps along
//! the frequency axis, modulated in time by a raised cosine with an integer
//! number of periods over the patch. A patch is the likelihood-weighted sum of
//! the active prototypes, circularly shifted in time by one shared offset, plus
//! white Gaussian noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{TagVector, TrackId};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_tracks: usize,
    pub n_tags: usize,
    pub patch_freq_bins: usize,
    pub patch_frames: usize,
    /// Inclusive range of active tags per track.
    pub tags_per_track: [usize; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_tracks: 600,
            n_tags: 24,
            patch_freq_bins: 24,
            patch_frames: 64,
            tags_per_track: [3, 9],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.tags_per_track;
        if self.n_tracks < 3 {
            return Err(Error::invalid("corpus needs at least 3 tracks"));
        }
        if self.n_tags == 0 {
            return Err(Error::invalid("corpus needs at least one tag"));
        }
        if !(1 <= lo && lo <= hi && hi <= self.n_tags) {
            return Err(Error::invalid(format!(
                "tags_per_track [{lo}, {hi}] must satisfy 1 <= lo <= hi <= {}",
                self.n_tags
            )));
        }
        if self.patch_freq_bins == 0 || self.patch_frames == 0 {
            return Err(Error::invalid("patch dimensions must be positive"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// An `F x T` patch stored frequency-major: `values[f * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub freq_bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Patch {
    pub fn zeros(freq_bins: usize, frames: usize) -> Self {
        Patch {
            freq_bins,
            frames,
            values: vec![0.0; freq_bins * frames],
        }
    }

    pub fn from_values(freq_bins: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != freq_bins * frames {
            return Err(Error::dim("patch values", freq_bins * frames, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("patch contains non-finite values"));
        }
        Ok(Patch {
            freq_bins,
            frames,
            values,
        })
    }

    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.frames + t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: TrackId,
    pub tags: TagVector,
    /// Seed of this track's patch stream.
    pub patch_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub tracks: Vec<Track>,
    pub prototypes: Vec<Patch>,
}

impl Corpus {
    pub fn track(&self, id: TrackId) -> Result<&Track> {
        // Ids are dense and ascending.
        self.tracks
            .get(id as usize)
            .filter(|t| t.id == id)
            .ok_or(Error::UnknownTrack(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.tracks.iter().map(|t| t.id)
    }

    pub fn tag_table(&self) -> BTreeMap<TrackId, TagVector> {
        self.tracks.iter().map(|t| (t.id, t.tags.clone())).collect()
    }

    pub fn tag_table_for(&self, ids: &[TrackId]) -> Result<BTreeMap<TrackId, TagVector>> {
        ids.iter()
            .map(|&id| Ok((id, self.track(id)?.tags.clone())))
            .collect()
    }

    /// `count` patches of `id`, drawn from the stream keyed by `seed`.
    pub fn patches(&self, id: TrackId, count: usize, seed: u64) -> Result<Vec<Patch>> {
        let track = self.track(id)?;
        sample_patches(
            track,
            &self.prototypes,
            count,
            self.config.noise_sigma,
            Shift::Random,
            seed,
        )
    }
}

fn prototype(rng: &mut seed::Rng, freq_bins: usize, frames: usize) -> Patch {
    let bumps = 2;
    let mut profile = vec![0.0; freq_bins];
    for _ in 0..bumps {
        let centre = rng.random_range(0.0..freq_bins as f64);
        let width = rng.random_range(0.6..1.4);
        let height = rng.random_range(0.5..1.0);
        for (f, p) in profile.iter_mut().enumerate() {
            let z = (f as f64 - centre) / width;
            *p += height * (-0.5 * z * z).exp();
        }
    }
    let periods = rng.random_range(1..=4) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let envelope: Vec<f64> = (0..frames)
        .map(|t| 0.5 + 0.5 * (2.0 * PI * periods * t as f64 / frames as f64 + phase).cos())
        .collect();
    let mut values = Vec::with_capacity(freq_bins * frames);
    for &p in &profile {
        values.extend(envelope.iter().map(|&e| p * e));
    }
    let peak = values.iter().fold(0.0f64, |a, &b| a.max(b));
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Patch {
        freq_bins,
        frames,
        values,
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seed::derived_rng(cfg.seed, "corpus", 0);
    let prototypes = (0..cfg.n_tags)
        .map(|_| prototype(&mut rng, cfg.patch_freq_bins, cfg.patch_frames))
        .collect();
    let [lo, hi] = cfg.tags_per_track;
    let mut tracks = Vec::with_capacity(cfg.n_tracks);
    for id in 0..cfg.n_tracks {
        let k = rng.random_range(lo..=hi);
        let mut values = vec![0.0; cfg.n_tags];
        let mut active = index::sample(&mut rng, cfg.n_tags, k).into_vec();
        active.sort_unstable();
        for i in active {
            // (0.2, 1.0]
            values[i] = 1.0 - 0.8 * rng.random::<f64>();
        }
        let id = id as TrackId;
        tracks.push(Track {
            id,
            tags: TagVector::new(values)?,
            patch_seed: seed::derive(cfg.seed, "track", u64::from(id)),
        });
    }
    Ok(Corpus {
        config: cfg.clone(),
        tracks,
        prototypes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    /// A fresh uniform circular shift per patch.
    Random,
    Fixed(usize),
}

/// Noiseless mixture of the track's prototypes, circularly shifted by `shift` frames.
pub fn render_patch(track: &Track, prototypes: &[Patch], shift: usize) -> Result<Patch> {
    let first = prototypes
        .first()
        .ok_or_else(|| Error::invalid("no prototypes"))?;
    if prototypes.len() != track.tags.len() {
        return Err(Error::dim("render_patch: prototypes", track.tags.len(), prototypes.len()));
    }
    let (fb, fr) = (first.freq_bins, first.frames);
    let mut out = Patch::zeros(fb, fr);
    let shift = shift % fr;
    for (&w, proto) in track.tags.values().iter().zip(prototypes) {
        if w == 0.0 {
            continue;
        }
        for f in 0..fb {
            let src = &proto.values[f * fr..(f + 1) * fr];
            let dst = &mut out.values[f * fr..(f + 1) * fr];
            for (t, d) in dst.iter_mut().enumerate() {
                *d += w * src[(t + fr - shift) % fr];
            }
        }
    }
    Ok(out)
}

pub fn sample_patches(
    track: &Track,
    prototypes: &[Patch],
    count: usize,
    noise_sigma: f64,
    shift: Shift,
    seed: u64,
) -> Result<Vec<Patch>> {
    if count == 0 {
        return Err(Error::invalid("patch count must be >= 1"));
    }
    let mut rng = seed::derived_rng(seed ^ track.patch_seed, "patches", u64::from(track.id));
    let frames = prototypes.first().map_or(1, |p| p.frames);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = match shift {
            Shift::Random => rng.random_range(0..frames),
            Shift::Fixed(s) => s,
        };
        let mut patch = render_patch(track, prototypes, s)?;
        if noise_sigma > 0.0 {
            for v in &mut patch.values {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += noise_sigma * z;
            }
        }
        out.push(patch);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<TrackId>,
    pub validation: Vec<TrackId>,
    pub test: Vec<TrackId>,
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

pub fn split_corpus(ids: &[TrackId], ratios: [f64; 3], seed: u64) -> Result<Split> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::invalid("cannot split fewer than 3 tracks"));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid("split ratios must be non-negative and sum to 1"));
    }
    let mut sizes = [
        (ratios[0] * n as f64).round() as usize,
        (ratios[1] * n as f64).round() as usize,
        0,
    ];
    sizes[0] = sizes[0].min(n);
    sizes[1] = sizes[1].min(n - sizes[0]);
    sizes[2] = n - sizes[0] - sizes[1];
    // Keep every part with a positive ratio non-empty.
    for part in 0..3 {
        if sizes[part] == 0 && ratios[part] > 0.0 {
            let donor = (0..3).max_by_key(|&p| sizes[p]).unwrap_or(0);
            sizes[donor] -= 1;
            sizes[part] += 1;
        }
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut seed::derived_rng(seed, "split", 0));
    let take = |start: usize, len: usize| {
        let mut v = shuffled[start..start + len].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: take(0, sizes[0]),
        validation: take(sizes[0], sizes[1]),
        test: take(sizes[0] + sizes[1], sizes[2]),
    })
}

/// Component `i` is 1 iff `t_i >= threshold`.
pub fn binarize_tags(t: &TagVector, threshold: f64) -> Vec<u8> {
    t.values().iter().map(|&v| u8::from(v >= threshold)).collect()
}

pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;
