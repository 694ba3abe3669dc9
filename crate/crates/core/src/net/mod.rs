//! A small convolutional network with hand-derived gradients.
//!
//! The network is a stack of `conv -> ReLU -> max-pool` blocks followed by a
//! head that removes the remaining frequency/time axes and projects to the
//! output dimension:
//!
//! * `max` head: global max over frequency and time, then a dense layer;
//! * `autopool` head: max over frequency only, a dense layer applied at every
//!   time step, then auto-pooling over time with a learned sharpness per
//!   output channel (or one shared scalar).
//!
//! Embedding mode L2-normalizes the output, tag mode applies a sigmoid and raw
//! mode leaves it linear.

mod gradcheck;
pub mod ops;

use log::warn;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Patch};
use crate::error::{Error, Result};
use crate::oracle::TrackId;
use crate::seed;
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckLoss, GRADCHECK_FLOOR, GRADCHECK_STEP};
pub use ops::{autopool, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    Embed,
    Tag,
    /// Linear outputs; used for diagnostics.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalPool {
    Max,
    Autopool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 2],
    pub channels: usize,
    pub pool: [usize; 2],
}

impl ConvSpec {
    pub fn new(kernel: [usize; 2], channels: usize, pool: [usize; 2]) -> Self {
        ConvSpec {
            kernel,
            channels,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: ModelMode,
    /// Input patch `[freq_bins, frames]`.
    pub input: [usize; 2],
    pub layers: Vec<ConvSpec>,
    pub embedding_dim: usize,
    pub n_tags: usize,
    pub temporal_pool: TemporalPool,
    /// One auto-pooling scalar for all channels instead of one per channel.
    pub autopool_shared: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ModelMode::Embed,
            input: [24, 64],
            layers: vec![
                ConvSpec::new([3, 3], 16, [2, 2]),
                ConvSpec::new([3, 3], 32, [2, 2]),
            ],
            embedding_dim: 32,
            n_tags: 24,
            temporal_pool: TemporalPool::Max,
            autopool_shared: false,
        }
    }
}

impl ModelConfig {
    fn stack(channels: &[usize], pools: &[[usize; 2]]) -> Vec<ConvSpec> {
        channels
            .iter()
            .zip(pools)
            .map(|(&c, &p)| ConvSpec::new([3, 3], c, p))
            .collect()
    }

    /// Full-size 96x512 max-pooling network (embedding or tagger output).
    pub fn full_scale_max(mode: ModelMode, embedding_dim: usize, n_tags: usize) -> Self {
        ModelConfig {
            mode,
            input: [96, 512],
            layers: Self::stack(
                &[128, 256, 512, 1024, 2048],
                &[[2, 4], [2, 4], [2, 4], [3, 3], [4, 2]],
            ),
            embedding_dim,
            n_tags,
            temporal_pool: TemporalPool::Max,
            autopool_shared: false,
        }
    }

    /// Full-size 96x512 network keeping 32 time steps for auto-pooling.
    pub fn full_scale_autopool(embedding_dim: usize) -> Self {
        ModelConfig {
            mode: ModelMode::Embed,
            input: [96, 512],
            layers: Self::stack(
                &[64, 128, 256, 512, 1024],
                &[[2, 2], [2, 2], [2, 2], [2, 2], [1, 1]],
            ),
            embedding_dim,
            n_tags: 0,
            temporal_pool: TemporalPool::Autopool,
            autopool_shared: false,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            ModelMode::Tag => self.n_tags,
            ModelMode::Embed | ModelMode::Raw => self.embedding_dim,
        }
    }

    /// Feature-map dimensions after every conv block, starting with the input.
    pub fn feature_dims(&self) -> Result<Vec<Dims>> {
        let [f, t] = self.input;
        if f == 0 || t == 0 {
            return Err(Error::invalid("model input dimensions must be positive"));
        }
        let mut dims = vec![Dims { c: 1, h: f, w: t }];
        for (l, spec) in self.layers.iter().enumerate() {
            let [kh, kw] = spec.kernel;
            let [py, px] = spec.pool;
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::invalid(format!("layer {l}: kernel sizes must be odd")));
            }
            if spec.channels == 0 || py == 0 || px == 0 {
                return Err(Error::invalid(format!("layer {l}: channels and pool sizes must be positive")));
            }
            let prev = dims[dims.len() - 1];
            let next = Dims {
                c: spec.channels,
                h: prev.h / py,
                w: prev.w / px,
            };
            if next.h == 0 || next.w == 0 {
                return Err(Error::invalid(format!(
                    "layer {l}: pooling {py}x{px} empties a {}x{} map",
                    prev.h, prev.w
                )));
            }
            dims.push(next);
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_dims()?;
        if self.output_dim() == 0 {
            return Err(Error::invalid("output dimension must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct ConvLayout {
    weight: Block,
    bias: Block,
    spec: ConvSpec,
    in_dims: Dims,
    conv_dims: Dims,
}

/// Flat parameter vector; block layout is owned by [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub values: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone, Default)]
pub struct Cache {
    layers: Vec<LayerCache>,
    head_input: Vec<f64>,
    head_arg: Vec<u32>,
    features: Vec<f64>,
    dense_out: Vec<f64>,
    pool_weights: Vec<Vec<f64>>,
    pool_values: Vec<f64>,
    output: Vec<f64>,
    norm: f64,
    /// Set when the embedding was a zero vector.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    post: Vec<f64>,
    argmax: Vec<u32>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Distance of the forward pass to the nearest non-differentiable point:
    /// the smallest |ReLU pre-activation| and the smallest gap between a
    /// positive pooled maximum and its runner-up.
    pub fn kink_margin(&self, net: &Network) -> f64 {
        let mut margin = f64::INFINITY;
        for (lc, layout) in self.layers.iter().zip(&net.conv) {
            for &v in &lc.pre {
                margin = margin.min(v.abs());
            }
            margin = margin.min(positive_window_margin(&lc.post, layout.conv_dims, layout.spec.pool));
        }
        let head_dims = net.head_dims;
        let pool = match net.config.temporal_pool {
            TemporalPool::Max => [head_dims.h, head_dims.w],
            TemporalPool::Autopool => [head_dims.h, 1],
        };
        let head_margin = if net.conv.is_empty() {
            ops::maxpool_margin(&self.head_input, head_dims, pool)
        } else {
            positive_window_margin(&self.head_input, head_dims, pool)
        };
        margin.min(head_margin)
    }
}

fn positive_window_margin(input: &[f64], dims: Dims, pool: [usize; 2]) -> f64 {
    let [py, px] = pool;
    let (oh, ow) = (dims.h / py, dims.w / px);
    let mut margin = f64::INFINITY;
    if py * px < 2 {
        return margin;
    }
    for c in 0..dims.c {
        let base = c * dims.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for y in oy * py..(oy + 1) * py {
                    for x in ox * px..(ox + 1) * px {
                        let v = input[base + y * dims.w + x];
                        if v > a {
                            b = a;
                            a = v;
                        } else if v > b {
                            b = v;
                        }
                    }
                }
                if a > 0.0 {
                    margin = margin.min(a - b);
                }
            }
        }
    }
    margin
}

/// Network structure: configuration plus the parameter layout derived from it.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    conv: Vec<ConvLayout>,
    head_dims: Dims,
    dense_weight: Block,
    dense_bias: Block,
    alpha: Option<Block>,
    n_params: usize,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.feature_dims()?;
        let mut offset = 0;
        let mut block = |name: String, shape: Vec<usize>| {
            let b = Block {
                name,
                shape,
                offset,
            };
            offset += b.len();
            b
        };
        let mut conv = Vec::new();
        for (l, spec) in config.layers.iter().enumerate() {
            let in_dims = dims[l];
            let [kh, kw] = spec.kernel;
            conv.push(ConvLayout {
                weight: block(format!("conv{l}.weight"), vec![spec.channels, in_dims.c, kh, kw]),
                bias: block(format!("conv{l}.bias"), vec![spec.channels]),
                spec: *spec,
                in_dims,
                conv_dims: Dims {
                    c: spec.channels,
                    h: in_dims.h,
                    w: in_dims.w,
                },
            });
        }
        let head_dims = dims[dims.len() - 1];
        let out = config.output_dim();
        let dense_weight = block("dense.weight".into(), vec![out, head_dims.c]);
        let dense_bias = block("dense.bias".into(), vec![out]);
        let alpha = (config.temporal_pool == TemporalPool::Autopool).then(|| {
            let n = if config.autopool_shared { 1 } else { out };
            block("autopool.alpha".into(), vec![n])
        });
        Ok(Network {
            config,
            conv,
            head_dims,
            dense_weight,
            dense_bias,
            alpha,
            n_params: offset,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        for c in &self.conv {
            out.push(c.weight.clone());
            out.push(c.bias.clone());
        }
        out.push(self.dense_weight.clone());
        out.push(self.dense_bias.clone());
        out.extend(self.alpha.clone());
        out
    }

    /// He-normal conv weights, `N(0, 1/fan_in)` dense weights, zero biases,
    /// auto-pooling sharpness 0 (mean pooling).
    pub fn init_params(&self, seed: u64) -> Parameters {
        let mut rng = seed::derived_rng(seed, "init", 0);
        let mut values = vec![0.0; self.n_params];
        for c in &self.conv {
            let fan_in = c.in_dims.c * c.spec.kernel[0] * c.spec.kernel[1];
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut values[c.weight.range()] {
                *v = normal.sample(&mut rng);
            }
        }
        let normal = Normal::new(0.0, (1.0 / self.head_dims.c as f64).sqrt()).expect("positive std");
        for v in &mut values[self.dense_weight.range()] {
            *v = normal.sample(&mut rng);
        }
        Parameters { values }
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.n_params]
    }

    pub fn alpha_values<'a>(&self, params: &'a Parameters) -> &'a [f64] {
        self.alpha.as_ref().map_or(&[], |b| &params.values[b.range()])
    }

    fn check_params(&self, params: &Parameters) -> Result<()> {
        if params.values.len() != self.n_params {
            return Err(Error::dim("parameter count", self.n_params, params.values.len()));
        }
        Ok(())
    }

    fn check_patch(&self, patch: &Patch) -> Result<()> {
        let [f, t] = self.config.input;
        if patch.freq_bins != f || patch.frames != t || patch.values.len() != f * t {
            return Err(Error::dim("patch size", f * t, patch.values.len()));
        }
        Ok(())
    }

    /// Runs the network on one patch; the output is also kept in the cache.
    pub fn forward(&self, params: &Parameters, patch: &Patch) -> Result<(Vec<f64>, Cache)> {
        self.check_params(params)?;
        self.check_patch(patch)?;
        let p = &params.values;
        let mut cache = Cache::default();
        let mut current = patch.values.clone();
        for (l, c) in self.conv.iter().enumerate() {
            let mut pre = vec![0.0; c.conv_dims.len()];
            ops::conv2d_forward(
                &current,
                c.in_dims,
                &p[c.weight.range()],
                &p[c.bias.range()],
                c.spec.channels,
                c.spec.kernel,
                &mut pre,
            );
            if pre.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    location: format!("conv layer {l}"),
                });
            }
            let mut post = pre.clone();
            ops::relu_inplace(&mut post);
            let out_dims = Dims {
                c: c.spec.channels,
                h: c.in_dims.h / c.spec.pool[0],
                w: c.in_dims.w / c.spec.pool[1],
            };
            let mut pooled = vec![0.0; out_dims.len()];
            let argmax = ops::maxpool_forward(&post, c.conv_dims, c.spec.pool, &mut pooled);
            cache.layers.push(LayerCache {
                input: std::mem::replace(&mut current, pooled),
                pre,
                post,
                argmax,
            });
        }

        let hd = self.head_dims;
        let out_dim = self.config.output_dim();
        let w = &p[self.dense_weight.range()];
        let b = &p[self.dense_bias.range()];
        let pre_output = match self.config.temporal_pool {
            TemporalPool::Max => {
                let mut feat = vec![0.0; hd.c];
                cache.head_arg = ops::maxpool_forward(&current, hd, [hd.h, hd.w], &mut feat);
                let z: Vec<f64> = (0..out_dim)
                    .map(|o| b[o] + dot(&w[o * hd.c..(o + 1) * hd.c], &feat))
                    .collect();
                cache.features = feat;
                cache.dense_out = z.clone();
                z
            }
            TemporalPool::Autopool => {
                // features[c * T + t]
                let mut feat = vec![0.0; hd.c * hd.w];
                cache.head_arg = ops::maxpool_forward(&current, hd, [hd.h, 1], &mut feat);
                // dense_out[o * T + t]
                let mut z = vec![0.0; out_dim * hd.w];
                for o in 0..out_dim {
                    let zo = &mut z[o * hd.w..(o + 1) * hd.w];
                    zo.fill(b[o]);
                    for c in 0..hd.c {
                        let wv = w[o * hd.c + c];
                        for (zv, fv) in zo.iter_mut().zip(&feat[c * hd.w..(c + 1) * hd.w]) {
                            *zv += wv * fv;
                        }
                    }
                }
                let alpha = self.alpha_values(params);
                let mut pooled = Vec::with_capacity(out_dim);
                for o in 0..out_dim {
                    let a = alpha[if self.config.autopool_shared { 0 } else { o }];
                    let (y, weights) = ops::autopool_weights(&z[o * hd.w..(o + 1) * hd.w], a);
                    pooled.push(y);
                    cache.pool_weights.push(weights);
                }
                cache.features = feat;
                cache.dense_out = z;
                cache.pool_values = pooled.clone();
                pooled
            }
        };
        if pre_output.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: "output layer".into(),
            });
        }
        cache.head_input = current;
        let output = match self.config.mode {
            ModelMode::Embed => {
                let (y, norm, degenerate) = ops::l2_normalize(&pre_output);
                if degenerate {
                    warn!("zero embedding before normalization; returning the first basis vector");
                }
                cache.norm = norm;
                cache.degenerate = degenerate;
                y
            }
            ModelMode::Tag => pre_output.iter().map(|&v| ops::sigmoid(v)).collect(),
            ModelMode::Raw => pre_output,
        };
        cache.output = output.clone();
        Ok((output, cache))
    }

    pub fn forward_embed(&self, params: &Parameters, patch: &Patch) -> Result<(Vec<f64>, Cache)> {
        if self.config.mode != ModelMode::Embed {
            return Err(Error::invalid("forward_embed needs an embedding-mode network"));
        }
        self.forward(params, patch)
    }

    pub fn forward_tags(&self, params: &Parameters, patch: &Patch) -> Result<(Vec<f64>, Cache)> {
        if self.config.mode != ModelMode::Tag {
            return Err(Error::invalid("forward_tags needs a tag-mode network"));
        }
        self.forward(params, patch)
    }

    /// Parameter gradients for `dL/d(output) = grad_output`.
    pub fn backward(&self, params: &Parameters, cache: &Cache, grad_output: &[f64]) -> Result<Vec<f64>> {
        let mut grads = self.zero_grads();
        self.backward_into(params, cache, grad_output, &mut grads)?;
        Ok(grads)
    }

    /// As [`Network::backward`], accumulating into `grads`.
    pub fn backward_into(
        &self,
        params: &Parameters,
        cache: &Cache,
        grad_output: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        self.check_params(params)?;
        if cache.output.is_empty() {
            return Err(Error::State("backward called without a forward cache".into()));
        }
        if cache.layers.len() != self.conv.len() || cache.head_input.len() != self.head_dims.len() {
            return Err(Error::State("forward cache does not belong to this network".into()));
        }
        let out_dim = self.config.output_dim();
        if grad_output.len() != out_dim {
            return Err(Error::dim("output gradient", out_dim, grad_output.len()));
        }
        if grads.len() != self.n_params {
            return Err(Error::dim("gradient buffer", self.n_params, grads.len()));
        }
        let p = &params.values;
        let grad_pre_output: Vec<f64> = match self.config.mode {
            ModelMode::Embed => ops::l2_normalize_backward(&cache.output, cache.norm, grad_output),
            ModelMode::Tag => cache
                .output
                .iter()
                .zip(grad_output)
                .map(|(y, g)| g * y * (1.0 - y))
                .collect(),
            ModelMode::Raw => grad_output.to_vec(),
        };

        let hd = self.head_dims;
        let w = &p[self.dense_weight.range()];
        let mut grad_head = vec![0.0; hd.len()];
        match self.config.temporal_pool {
            TemporalPool::Max => {
                let mut gfeat = vec![0.0; hd.c];
                {
                    let gw = &mut grads[self.dense_weight.range()];
                    for (o, &g) in grad_pre_output.iter().enumerate() {
                        for c in 0..hd.c {
                            gw[o * hd.c + c] += g * cache.features[c];
                            gfeat[c] += w[o * hd.c + c] * g;
                        }
                    }
                }
                for (gb, &g) in grads[self.dense_bias.range()].iter_mut().zip(&grad_pre_output) {
                    *gb += g;
                }
                for (c, &g) in gfeat.iter().enumerate() {
                    grad_head[cache.head_arg[c] as usize] += g;
                }
            }
            TemporalPool::Autopool => {
                let t_len = hd.w;
                let alpha_block = self.alpha.as_ref().expect("autopool network has alpha");
                let alpha = &p[alpha_block.range()];
                let mut gz = vec![0.0; out_dim * t_len];
                let mut galpha = vec![0.0; alpha.len()];
                for o in 0..out_dim {
                    let ai = if self.config.autopool_shared { 0 } else { o };
                    galpha[ai] += ops::autopool_backward(
                        &cache.dense_out[o * t_len..(o + 1) * t_len],
                        alpha[ai],
                        cache.pool_values[o],
                        &cache.pool_weights[o],
                        grad_pre_output[o],
                        &mut gz[o * t_len..(o + 1) * t_len],
                    );
                }
                for (g, d) in grads[alpha_block.range()].iter_mut().zip(&galpha) {
                    *g += d;
                }
                let mut gfeat = vec![0.0; hd.c * t_len];
                {
                    let gw = &mut grads[self.dense_weight.range()];
                    for o in 0..out_dim {
                        let gzo = &gz[o * t_len..(o + 1) * t_len];
                        for c in 0..hd.c {
                            let f = &cache.features[c * t_len..(c + 1) * t_len];
                            gw[o * hd.c + c] += dot(gzo, f);
                            let wv = w[o * hd.c + c];
                            for (gf, g) in gfeat[c * t_len..(c + 1) * t_len].iter_mut().zip(gzo) {
                                *gf += wv * g;
                            }
                        }
                    }
                }
                for (o, gb) in grads[self.dense_bias.range()].iter_mut().enumerate() {
                    *gb += gz[o * t_len..(o + 1) * t_len].iter().sum::<f64>();
                }
                for (i, &g) in gfeat.iter().enumerate() {
                    grad_head[cache.head_arg[i] as usize] += g;
                }
            }
        }

        let mut grad_pooled = grad_head;
        for (l, (c, lc)) in self.conv.iter().zip(&cache.layers).enumerate().rev() {
            let mut grad_pre = vec![0.0; c.conv_dims.len()];
            for (&idx, &g) in lc.argmax.iter().zip(&grad_pooled) {
                let idx = idx as usize;
                if lc.pre[idx] > 0.0 {
                    grad_pre[idx] += g;
                }
            }
            let mut grad_input = (l > 0).then(|| vec![0.0; c.in_dims.len()]);
            let (gw, gb) = split_two(grads, c.weight.range(), c.bias.range());
            ops::conv2d_backward(
                &lc.input,
                c.in_dims,
                &p[c.weight.range()],
                c.spec.channels,
                c.spec.kernel,
                &grad_pre,
                gw,
                gb,
                grad_input.as_deref_mut(),
            );
            if let Some(gi) = grad_input {
                grad_pooled = gi;
            }
        }
        Ok(())
    }

    /// Mean network output over `patches`.
    pub fn mean_output(&self, params: &Parameters, patches: &[Patch]) -> Result<Vec<f64>> {
        if patches.is_empty() {
            return Err(Error::invalid("need at least one patch"));
        }
        let mut acc = vec![0.0; self.config.output_dim()];
        for patch in patches {
            let (y, _) = self.forward(params, patch)?;
            for (a, v) in acc.iter_mut().zip(y) {
                *a += v;
            }
        }
        let n = patches.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// Mean of the embeddings of `n_patches` patches of the track (not re-normalized).
    pub fn track_embedding(
        &self,
        params: &Parameters,
        corpus: &Corpus,
        id: TrackId,
        n_patches: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if self.config.mode != ModelMode::Embed {
            return Err(Error::invalid("track_embedding needs an embedding-mode network"));
        }
        if n_patches == 0 {
            return Err(Error::invalid("n_patches must be >= 1"));
        }
        self.mean_output(params, &corpus.patches(id, n_patches, seed)?)
    }

    /// Mean of the tag likelihoods of `n_patches` patches of the track.
    pub fn track_tag_estimate(
        &self,
        params: &Parameters,
        corpus: &Corpus,
        id: TrackId,
        n_patches: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if self.config.mode != ModelMode::Tag {
            return Err(Error::invalid("track_tag_estimate needs a tag-mode network"));
        }
        if n_patches == 0 {
            return Err(Error::invalid("n_patches must be >= 1"));
        }
        self.mean_output(params, &corpus.patches(id, n_patches, seed)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two disjoint mutable sub-slices, `a` before `b`.
fn split_two(
    buf: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}
