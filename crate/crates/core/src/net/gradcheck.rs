//! Central finite-difference check of [`Network::backward`].

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, ModelMode, Network, Parameters};
use crate::corpus::Patch;
use crate::error::{Error, Result};
use crate::seed;
use crate::train::loss::{bce_loss, triplet_loss};

pub const GRADCHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so components that are zero up to
/// finite-difference noise do not dominate.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

/// Minimum distance to a ReLU/max-pool kink or the hinge boundary for a test
/// point to count as non-degenerate.
const KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradCheckLoss {
    /// Random linear functional of the output.
    Projection,
    /// Triplet loss over three independent random patches.
    Triplet { margin: f64 },
    /// Summed BCE against random binary targets.
    Bce,
}

impl GradCheckLoss {
    fn for_mode(mode: ModelMode) -> Self {
        match mode {
            // Large margin keeps the hinge active at every test point.
            ModelMode::Embed => GradCheckLoss::Triplet { margin: 4.5 },
            ModelMode::Tag => GradCheckLoss::Bce,
            ModelMode::Raw => GradCheckLoss::Projection,
        }
    }
}

struct Problem {
    patches: Vec<Patch>,
    weights: Vec<f64>,
    loss: GradCheckLoss,
}

impl Problem {
    fn loss_and_grad(&self, net: &Network, params: &Parameters, want_grad: bool) -> Result<(f64, Vec<f64>, f64)> {
        let mut outs = Vec::new();
        let mut caches = Vec::new();
        let mut margin = f64::INFINITY;
        for p in &self.patches {
            let (y, cache) = net.forward(params, p)?;
            margin = margin.min(cache.kink_margin(net));
            if cache.degenerate {
                margin = 0.0;
            }
            outs.push(y);
            caches.push(cache);
        }
        let (loss, out_grads) = match self.loss {
            GradCheckLoss::Projection => (
                outs[0].iter().zip(&self.weights).map(|(a, b)| a * b).sum(),
                vec![self.weights.clone()],
            ),
            GradCheckLoss::Triplet { margin: m } => {
                let t = triplet_loss(&outs[0], &outs[1], &outs[2], m)?;
                margin = margin.min(t.loss);
                (t.loss, vec![t.grad_anchor, t.grad_positive, t.grad_negative])
            }
            GradCheckLoss::Bce => {
                let (l, g) = bce_loss(&outs[0], &self.weights)?;
                (l, vec![g])
            }
        };
        let mut grads = net.zero_grads();
        if want_grad {
            for (cache, g) in caches.iter().zip(&out_grads) {
                net.backward_into(params, cache, g, &mut grads)?;
            }
        }
        Ok((loss, grads, margin))
    }
}

/// Worst relative error between analytic and central-difference gradients,
/// with the loss implied by the network mode.
pub fn gradient_check(config: &ModelConfig, seed: u64) -> Result<f64> {
    gradient_check_with(config, GradCheckLoss::for_mode(config.mode), seed)
}

pub fn gradient_check_with(config: &ModelConfig, loss: GradCheckLoss, seed: u64) -> Result<f64> {
    let net = Network::new(config.clone())?;
    let [f, t] = config.input;
    let out_dim = config.output_dim();
    let n_patches = if matches!(loss, GradCheckLoss::Triplet { .. }) { 3 } else { 1 };
    if matches!(loss, GradCheckLoss::Triplet { .. }) && config.mode != ModelMode::Embed {
        return Err(Error::invalid("triplet gradient check needs an embedding network"));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seed::derived_rng(seed, "gradcheck", attempt);
        let mut params = net.init_params(seed::derive(seed, "gradcheck-init", attempt));
        // Non-zero biases and sharpness, so every parameter gets a generic gradient.
        for b in net.blocks() {
            if b.name.ends_with("bias") || b.name.starts_with("autopool") {
                for v in &mut params.values[b.range()] {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let patches = (0..n_patches)
            .map(|_| {
                let values = (0..f * t).map(|_| StandardNormal.sample(&mut rng)).collect();
                Patch::from_values(f, t, values)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = match loss {
            GradCheckLoss::Bce => (0..out_dim).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect(),
            _ => (0..out_dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
        };
        let problem = Problem { patches, weights, loss };
        let (_, analytic, margin) = problem.loss_and_grad(&net, &params, true)?;
        if margin < KINK_MARGIN {
            continue;
        }
        let mut worst: f64 = 0.0;
        for k in 0..params.values.len() {
            let orig = params.values[k];
            params.values[k] = orig + GRADCHECK_STEP;
            let (up, _, _) = problem.loss_and_grad(&net, &params, false)?;
            params.values[k] = orig - GRADCHECK_STEP;
            let (down, _, _) = problem.loss_and_grad(&net, &params, false)?;
            params.values[k] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            worst = worst.max(err);
        }
        return Ok(worst);
    }
    Err(Error::Numeric {
        location: format!("gradient check: no non-degenerate point in {MAX_ATTEMPTS} attempts"),
    })
}
