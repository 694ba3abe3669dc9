//! Triplet hinge loss and summed binary cross-entropy.

use crate::error::{Error, Result};

/// Probabilities are clipped into `[BCE_CLIP, 1 - BCE_CLIP]`.
pub const BCE_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(|a - p|^2 - |a - n|^2 + margin, 0)` with its gradients. The hinge
/// boundary takes the zero subgradient.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletLoss> {
    let d = anchor.len();
    if positive.len() != d {
        return Err(Error::dim("triplet_loss: positive", d, positive.len()));
    }
    if negative.len() != d {
        return Err(Error::dim("triplet_loss: negative", d, negative.len()));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid("triplet margin must be > 0"));
    }
    let value = sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin;
    if value <= 0.0 {
        return Ok(TripletLoss {
            loss: 0.0,
            grad_anchor: vec![0.0; d],
            grad_positive: vec![0.0; d],
            grad_negative: vec![0.0; d],
        });
    }
    let mut out = TripletLoss {
        loss: value,
        grad_anchor: Vec::with_capacity(d),
        grad_positive: Vec::with_capacity(d),
        grad_negative: Vec::with_capacity(d),
    };
    for k in 0..d {
        let (a, p, n) = (anchor[k], positive[k], negative[k]);
        out.grad_anchor.push(2.0 * (n - p));
        out.grad_positive.push(-2.0 * (a - p));
        out.grad_negative.push(2.0 * (a - n));
    }
    Ok(out)
}

/// `sum_i -[y_i ln p_i + (1 - y_i) ln(1 - p_i)]` and `dL/dp`.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::dim("bce_loss: target", pred.len(), target.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let pc = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        grad.push(if pc == p { -y / p + (1.0 - y) / (1.0 - p) } else { 0.0 });
    }
    Ok((loss, grad))
}
