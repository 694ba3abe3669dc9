//! Training: Adam, mini-batch construction, early stopping and the two
//! training loops (triplet embedding and BCE tagger).

pub mod loss;

use log::{debug, warn};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{binarize_tags, Corpus, Patch};
use crate::error::{Error, Result};
use crate::mining::{group_triplets, Triplet, TripletGroup};
use crate::net::{ModelMode, Network, Parameters};
use crate::oracle::TrackId;
use crate::seed;
pub use loss::{bce_loss, triplet_loss, TripletLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_triplets: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Upper bound on validation (anchor, positive) groups scored each epoch.
    pub validation_groups: usize,
    /// Tagger: passes over the training tracks per epoch (one patch per track per pass).
    pub tagger_passes: usize,
    pub binarize_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            learning_rate: 1e-3,
            batch_triplets: 42,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 5,
            max_epochs: 30,
            seed: 0,
            validation_groups: 256,
            tagger_passes: 1,
            binarize_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::invalid("margin must be > 0"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if self.batch_triplets == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_triplets, patience and max_epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and epsilon > 0"));
        }
        if self.validation_groups == 0 || self.tagger_passes == 0 {
            return Err(Error::invalid("validation_groups and tagger_passes must be >= 1"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::invalid("binarize_threshold must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Parameters, grads: &[f64], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    let n = params.values.len();
    if grads.len() != n {
        return Err(Error::dim("adam_step: gradients", n, grads.len()));
    }
    if state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::dim("adam_step: optimizer state", n, state.first_moment.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        let m = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params.values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Patches for one anchor, one positive and their negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub anchor: TrackId,
    pub positive: TrackId,
    pub anchor_patch: Patch,
    pub positive_patch: Patch,
    pub negatives: Vec<(TrackId, Patch)>,
}

/// `batch_triplets` negatives of `group` with freshly sampled patches. The
/// anchor and positive patches are shared by every triplet of the batch.
pub fn minibatch_for_group(group: &TripletGroup, corpus: &Corpus, batch_triplets: usize, seed: u64) -> Result<Minibatch> {
    if group.negatives.is_empty() {
        return Err(Error::invalid("triplet group without negatives"));
    }
    let mut rng = seed::derived_rng(seed, "minibatch", 0);
    let picked: Vec<TrackId> = if group.negatives.len() <= batch_triplets {
        if group.negatives.len() < batch_triplets {
            warn!(
                "group ({}, {}) has {} negatives, batch wants {batch_triplets}",
                group.anchor,
                group.positive,
                group.negatives.len()
            );
        }
        group.negatives.clone()
    } else {
        let mut idx = index::sample(&mut rng, group.negatives.len(), batch_triplets).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| group.negatives[i]).collect()
    };
    let one = |id: TrackId, role: &str, k: u64| -> Result<Patch> {
        Ok(corpus.patches(id, 1, seed::derive(seed, role, k))?.remove(0))
    };
    let negatives = picked
        .iter()
        .enumerate()
        .map(|(k, &id)| Ok((id, one(id, "negative", k as u64)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Minibatch {
        anchor: group.anchor,
        positive: group.positive,
        anchor_patch: one(group.anchor, "anchor", 0)?,
        positive_patch: one(group.positive, "positive", 0)?,
        negatives,
    })
}

/// Picks one group of the pool and builds its mini-batch.
pub fn build_minibatch(pool: &[Triplet], corpus: &Corpus, batch_triplets: usize, seed: u64) -> Result<Minibatch> {
    let groups = group_triplets(pool);
    if groups.is_empty() {
        return Err(Error::invalid("empty triplet pool"));
    }
    let g = seed::derived_rng(seed, "pick-group", 0).random_range(0..groups.len());
    minibatch_for_group(&groups[g], corpus, batch_triplets, seed)
}

/// Mean triplet loss over the batch; accumulates its parameter gradient into
/// `grads` when given.
pub fn triplet_batch_loss(
    net: &Network,
    params: &Parameters,
    batch: &Minibatch,
    margin: f64,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    let (fa, ca) = net.forward(params, &batch.anchor_patch)?;
    let (fp, cp) = net.forward(params, &batch.positive_patch)?;
    let scale = 1.0 / batch.negatives.len() as f64;
    let d = fa.len();
    let mut ga = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let mut total = 0.0;
    let mut neg = Vec::with_capacity(batch.negatives.len());
    for (_, patch) in &batch.negatives {
        let (fneg, cn) = net.forward(params, patch)?;
        let l = triplet_loss(&fa, &fp, &fneg, margin)?;
        total += l.loss;
        if l.loss > 0.0 {
            for k in 0..d {
                ga[k] += scale * l.grad_anchor[k];
                gp[k] += scale * l.grad_positive[k];
            }
            neg.push((cn, l.grad_negative));
        }
    }
    if let Some(grads) = grads {
        if total > 0.0 {
            net.backward_into(params, &ca, &ga, grads)?;
            net.backward_into(params, &cp, &gp, grads)?;
            for (cn, g) in &neg {
                let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                net.backward_into(params, cn, &g, grads)?;
            }
        }
    }
    Ok(total * scale)
}

/// Mean summed-BCE over `(patch, target)` pairs; accumulates the gradient when given.
pub fn tag_batch_loss(
    net: &Network,
    params: &Parameters,
    batch: &[(Patch, Vec<f64>)],
    mut grads: Option<&mut [f64]>,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (patch, target) in batch {
        let (y, cache) = net.forward(params, patch)?;
        let (l, g) = bce_loss(&y, target)?;
        total += l;
        if let Some(grads) = grads.as_deref_mut() {
            let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
            net.backward_into(params, &cache, &g, grads)?;
        }
    }
    Ok(total * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch at which training stopped.
    pub stopped_epoch: usize,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch - 1]
    }
}

/// One epoch of optimisation plus a deterministic validation loss.
pub trait Trainer {
    fn train_epoch(&mut self, params: &mut Parameters, opt: &mut OptimizerState, epoch: usize) -> Result<f64>;
    fn validation_loss(&mut self, params: &Parameters) -> Result<f64>;
}

/// Runs epochs until the validation loss fails to improve for `patience`
/// consecutive epochs, returning the best-validation parameters.
pub fn fit<T: Trainer>(trainer: &mut T, mut params: Parameters, cfg: &TrainConfig) -> Result<(Parameters, TrainReport)> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(params.values.len());
    let initial_val_loss = trainer.validation_loss(&params)?;
    let mut report = TrainReport {
        initial_val_loss,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
    };
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let train = trainer.train_epoch(&mut params, &mut opt, epoch)?;
        let val = trainer.validation_loss(&params)?;
        if !train.is_finite() || !val.is_finite() || params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: format!("training epoch {epoch}"),
            });
        }
        debug!("epoch {epoch}: train {train:.6} val {val:.6}");
        report.train_loss.push(train);
        report.val_loss.push(val);
        report.stopped_epoch = epoch;
        if val < best_val {
            best_val = val;
            best.values.clone_from(&params.values);
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, report))
}

/// Triplet-loss training over pre-mined (anchor, positive) groups.
pub struct TripletTrainer<'a> {
    pub net: &'a Network,
    pub corpus: &'a Corpus,
    pub train_groups: Vec<TripletGroup>,
    pub validation_groups: Vec<TripletGroup>,
    pub cfg: TrainConfig,
}

impl<'a> TripletTrainer<'a> {
    pub fn new(
        net: &'a Network,
        corpus: &'a Corpus,
        train: &[Triplet],
        validation: &[Triplet],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if net.config().mode != ModelMode::Embed {
            return Err(Error::invalid("triplet training needs an embedding-mode network"));
        }
        let train_groups = group_triplets(train);
        let mut validation_groups = group_triplets(validation);
        if train_groups.is_empty() || validation_groups.is_empty() {
            return Err(Error::invalid("training and validation triplets must be non-empty"));
        }
        if validation_groups.len() > cfg.validation_groups {
            validation_groups.shuffle(&mut seed::derived_rng(cfg.seed, "val-groups", 0));
            validation_groups.truncate(cfg.validation_groups);
        }
        Ok(TripletTrainer {
            net,
            corpus,
            train_groups,
            validation_groups,
            cfg: cfg.clone(),
        })
    }
}

impl Trainer for TripletTrainer<'_> {
    fn train_epoch(&mut self, params: &mut Parameters, opt: &mut OptimizerState, epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train_groups.len()).collect();
        order.shuffle(&mut seed::derived_rng(self.cfg.seed, "epoch-order", epoch as u64));
        let mut grads = self.net.zero_grads();
        let mut total = 0.0;
        for (b, &g) in order.iter().enumerate() {
            let batch_seed = seed::derive(self.cfg.seed, "train-batch", ((epoch as u64) << 32) | b as u64);
            let batch = minibatch_for_group(&self.train_groups[g], self.corpus, self.cfg.batch_triplets, batch_seed)?;
            grads.fill(0.0);
            let l = triplet_batch_loss(self.net, params, &batch, self.cfg.margin, Some(&mut grads))?;
            if !l.is_finite() {
                return Err(Error::Numeric {
                    location: format!("training epoch {epoch}"),
                });
            }
            total += l;
            adam_step(params, &grads, opt, &self.cfg)?;
        }
        Ok(total / order.len() as f64)
    }

    fn validation_loss(&mut self, params: &Parameters) -> Result<f64> {
        let mut total = 0.0;
        for (k, group) in self.validation_groups.iter().enumerate() {
            let batch_seed = seed::derive(self.cfg.seed, "val-batch", k as u64);
            let batch = minibatch_for_group(group, self.corpus, self.cfg.batch_triplets, batch_seed)?;
            total += triplet_batch_loss(self.net, params, &batch, self.cfg.margin, None)?;
        }
        Ok(total / self.validation_groups.len() as f64)
    }
}

/// Tagger training on binarized tag targets.
pub struct TagTrainer<'a> {
    pub net: &'a Network,
    pub corpus: &'a Corpus,
    pub train_ids: Vec<TrackId>,
    pub validation_ids: Vec<TrackId>,
    pub cfg: TrainConfig,
}

impl<'a> TagTrainer<'a> {
    pub fn new(
        net: &'a Network,
        corpus: &'a Corpus,
        train_ids: &[TrackId],
        validation_ids: &[TrackId],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if net.config().mode != ModelMode::Tag {
            return Err(Error::invalid("tagger training needs a tag-mode network"));
        }
        if net.config().n_tags != corpus.config.n_tags {
            return Err(Error::dim("tagger outputs", corpus.config.n_tags, net.config().n_tags));
        }
        if train_ids.is_empty() || validation_ids.is_empty() {
            return Err(Error::invalid("training and validation sets must be non-empty"));
        }
        Ok(TagTrainer {
            net,
            corpus,
            train_ids: train_ids.to_vec(),
            validation_ids: validation_ids.to_vec(),
            cfg: cfg.clone(),
        })
    }

    fn target(&self, id: TrackId) -> Result<Vec<f64>> {
        Ok(binarize_tags(&self.corpus.track(id)?.tags, self.cfg.binarize_threshold)
            .into_iter()
            .map(f64::from)
            .collect())
    }
}

impl Trainer for TagTrainer<'_> {
    fn train_epoch(&mut self, params: &mut Parameters, opt: &mut OptimizerState, epoch: usize) -> Result<f64> {
        let mut order = Vec::with_capacity(self.train_ids.len() * self.cfg.tagger_passes);
        for pass in 0..self.cfg.tagger_passes {
            let mut ids = self.train_ids.clone();
            ids.shuffle(&mut seed::derived_rng(self.cfg.seed, "tag-order", ((epoch as u64) << 16) | pass as u64));
            order.extend(ids.into_iter().map(|id| (id, pass)));
        }
        let mut grads = self.net.zero_grads();
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_triplets) {
            let batch = chunk
                .iter()
                .map(|&(id, pass)| {
                    let s = seed::derive(self.cfg.seed, "tag-patch", ((epoch as u64) << 16) | pass as u64);
                    Ok((self.corpus.patches(id, 1, s)?.remove(0), self.target(id)?))
                })
                .collect::<Result<Vec<_>>>()?;
            grads.fill(0.0);
            let l = tag_batch_loss(self.net, params, &batch, Some(&mut grads))?;
            if !l.is_finite() {
                return Err(Error::Numeric {
                    location: format!("training epoch {epoch}"),
                });
            }
            total += l;
            batches += 1;
            adam_step(params, &grads, opt, &self.cfg)?;
        }
        Ok(total / batches as f64)
    }

    fn validation_loss(&mut self, params: &Parameters) -> Result<f64> {
        let s = seed::derive(self.cfg.seed, "tag-val", 0);
        let batch = self
            .validation_ids
            .iter()
            .map(|&id| Ok((self.corpus.patches(id, 1, s)?.remove(0), self.target(id)?)))
            .collect::<Result<Vec<_>>>()?;
        tag_batch_loss(self.net, params, &batch, None)
    }
}

/// What a training run learns from.
#[derive(Debug, Clone)]
pub enum TrainingData<'a> {
    Triplets {
        train: &'a [Triplet],
        validation: &'a [Triplet],
    },
    Tags {
        train: &'a [TrackId],
        validation: &'a [TrackId],
    },
}

/// Initializes parameters from `cfg.seed` and trains to early stopping.
pub fn train(net: &Network, corpus: &Corpus, data: TrainingData<'_>, cfg: &TrainConfig) -> Result<(Parameters, TrainReport)> {
    cfg.validate()?;
    let init = net.init_params(seed::derive(cfg.seed, "model-init", 0));
    match data {
        TrainingData::Triplets { train, validation } => {
            let mut trainer = TripletTrainer::new(net, corpus, train, validation, cfg)?;
            fit(&mut trainer, init, cfg)
        }
        TrainingData::Tags { train, validation } => {
            let mut trainer = TagTrainer::new(net, corpus, train, validation, cfg)?;
            fit(&mut trainer, init, cfg)
        }
    }
}

#[cfg(test)]
mod tests;
