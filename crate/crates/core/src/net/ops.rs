//! Forward and backward kernels over dense, channel-major buffers.

use crate::error::{Error, Result};

/// Shape of a `channels x height x width` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Same-padded 2-D convolution with odd kernels; `out` is overwritten.
pub fn conv2d_forward(
    input: &[f64],
    dims: Dims,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    kernel: [usize; 2],
    out: &mut [f64],
) {
    let [kh, kw] = kernel;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let (h, w) = (dims.h as isize, dims.w as isize);
    let plane = dims.plane();
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..dims.c {
            let inp = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..kh {
                let dy = ky as isize - ph;
                let y0 = (-dy).max(0);
                let y1 = (h - dy).min(h);
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w - dx).min(w) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weight[((co * dims.c + ci) * kh + ky) * kw + kx];
                    for y in y0..y1 {
                        let orow = y as usize * dims.w;
                        let irow = (y + dy) as usize * dims.w;
                        let src = &inp[(irow as isize + x0 as isize + dx) as usize
                            ..(irow as isize + x1 as isize + dx) as usize];
                        for (d, s) in o[orow + x0..orow + x1].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients; writes the input gradient when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    dims: Dims,
    weight: &[f64],
    cout: usize,
    kernel: [usize; 2],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let [kh, kw] = kernel;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let (h, w) = (dims.h as isize, dims.w as isize);
    let plane = dims.plane();
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.fill(0.0);
    }
    for co in 0..cout {
        let go = &grad_out[co * plane..(co + 1) * plane];
        grad_bias[co] += go.iter().sum::<f64>();
        for ci in 0..dims.c {
            let inp = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..kh {
                let dy = ky as isize - ph;
                let y0 = (-dy).max(0);
                let y1 = (h - dy).min(h);
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w - dx).min(w) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = ((co * dims.c + ci) * kh + ky) * kw + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let orow = y as usize * dims.w;
                        let irow = ((y + dy) as usize * dims.w) as isize + dx;
                        let g = &go[orow + x0..orow + x1];
                        let s = &inp[(irow + x0 as isize) as usize..(irow + x1 as isize) as usize];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let base = ci * plane;
                            let d = &mut gi[base + (irow + x0 as isize) as usize
                                ..base + (irow + x1 as isize) as usize];
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += wv * gv;
                            }
                        }
                    }
                    grad_weight[widx] += acc;
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Non-overlapping max pooling; remainders at the borders are dropped.
/// Returns the flat input index of each window maximum (first on ties).
pub fn maxpool_forward(input: &[f64], dims: Dims, pool: [usize; 2], out: &mut [f64]) -> Vec<u32> {
    let [py, px] = pool;
    let (oh, ow) = (dims.h / py, dims.w / px);
    let mut arg = vec![0u32; dims.c * oh * ow];
    for c in 0..dims.c {
        let base = c * dims.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0usize;
                for y in oy * py..(oy + 1) * py {
                    for x in ox * px..(ox + 1) * px {
                        let i = base + y * dims.w + x;
                        if input[i] > best {
                            best = input[i];
                            at = i;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = at as u32;
            }
        }
    }
    arg
}

/// Smallest gap between a window maximum and the runner-up in its window.
pub fn maxpool_margin(input: &[f64], dims: Dims, pool: [usize; 2]) -> f64 {
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
                margin = margin.min(a - b);
            }
        }
    }
    margin
}

/// Numerically stable auto-pooling: `sum_t x_t e^{a x_t} / sum_t e^{a x_t}`.
///
/// `alpha = 0` is the arithmetic mean, large positive `alpha` tends to the
/// maximum and large negative `alpha` to the minimum.
pub fn autopool(x: &[f64], alpha: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("autopool of an empty sequence"));
    }
    if !alpha.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("autopool input must be finite"));
    }
    Ok(autopool_weights(x, alpha).0)
}

/// Pooled value and the softmax weights `w_t`.
pub(crate) fn autopool_weights(x: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let shift = x
        .iter()
        .map(|&v| alpha * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (alpha * v - shift).exp()).collect();
    let z: f64 = e.iter().sum();
    let num: f64 = e.iter().zip(x).map(|(a, b)| a * b).sum();
    let y = num / z;
    (y, e.into_iter().map(|v| v / z).collect())
}

/// Gradients of auto-pooling w.r.t. inputs and `alpha`, given `dL/dy`.
pub(crate) fn autopool_backward(
    x: &[f64],
    alpha: f64,
    y: f64,
    weights: &[f64],
    grad: f64,
    grad_x: &mut [f64],
) -> f64 {
    let mut grad_alpha = 0.0;
    for ((g, &xt), &wt) in grad_x.iter_mut().zip(x).zip(weights) {
        let centred = xt - y;
        *g += grad * wt * (1.0 + alpha * centred);
        grad_alpha += wt * xt * centred;
    }
    grad * grad_alpha
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// L2-normalizes `v`. A zero vector maps to the first basis vector; the flag
/// reports that case.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64, bool) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e = vec![0.0; v.len()];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        return (e, 0.0, true);
    }
    (v.iter().map(|x| x / norm).collect(), norm, false)
}

/// Gradient through `y = v / |v|`: `(g - y (y . g)) / |v|`.
pub fn l2_normalize_backward(y: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; y.len()];
    }
    let dot: f64 = y.iter().zip(grad).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(grad)
        .map(|(yi, gi)| (gi - yi * dot) / norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn autopool_limits() {
        assert_eq!(autopool(&[1.0, 2.0, 3.0], 0.0).unwrap(), 2.0);
        assert!((autopool(&[1.0, 2.0, 3.0], 100.0).unwrap() - 3.0).abs() < 1e-6);
        assert!((autopool(&[1.0, 2.0, 3.0], -100.0).unwrap() - 1.0).abs() < 1e-6);
        let v = autopool(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((v - 2.0 / 3.0 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.4621).abs() < 1e-4);
        assert!(autopool(&[], 1.0).is_err());
        assert!(autopool(&[f64::NAN], 1.0).is_err());
        // No overflow for large alpha * x.
        assert_eq!(autopool(&[1e3, 2e3], 10.0).unwrap(), 2e3);
    }

    #[test]
    fn naive_conv_agrees() {
        let dims = Dims { c: 2, h: 4, w: 5 };
        let input: Vec<f64> = (0..dims.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (cout, k) = (3, [3, 3]);
        let weight: Vec<f64> = (0..cout * 2 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias = [0.1, -0.2, 0.3];
        let mut out = vec![0.0; cout * dims.plane()];
        conv2d_forward(&input, dims, &weight, &bias, cout, k, &mut out);
        for co in 0..cout {
            for y in 0..4i64 {
                for x in 0..5i64 {
                    let mut s = bias[co];
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (y + ky - 1, x + kx - 1);
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    s += weight[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * input[ci * 20 + iy as usize * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out[co * 20 + y as usize * 5 + x as usize] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalize_zero_vector() {
        let (y, n, degenerate) = l2_normalize(&[0.0, 0.0, 0.0]);
        assert_eq!(y, vec![1.0, 0.0, 0.0]);
        assert_eq!(n, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn sigmoid_ranges() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(20.0) >= 1.0 - 1e-8);
        assert!(sigmoid(-800.0) >= 0.0);
    }
}
