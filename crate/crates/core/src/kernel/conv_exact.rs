//! Exact NNGP of the conv → ReLU → 2x2 average-pool stack with a linear readout.
//!
//! Each layer carries the full spatial covariance `R[p, p']` between two
//! images. Convolution sums `R` over the nine shared tap offsets, ReLU applies
//! the arc-cosine expectation pointwise, pooling averages 2x2 × 2x2 blocks.

use crate::error::{Error, Result};
use crate::networks::{Architecture, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::exact::relu_arccos_step;

/// Pre-activation variances `Σ[p, p]` of one image at every conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGpDiagonal {
    pub layers: Vec<Vec<f64>>,
    /// `k(x, x)`.
    pub kernel: f64,
}

fn check_spec(spec: &NetworkSpec) -> Result<()> {
    if spec.arch != Architecture::ConvNet {
        return Err(Error::Config("exact conv kernel needs a convnet spec".into()));
    }
    spec.validate()
}

/// `Σ[p, p'] = σ_w²/9 · Σ_δ R[p+δ, p'+δ] + σ_b²` on an `h × w` grid; taps
/// outside the image contribute zero.
fn conv_cov(r: &[f64], h: usize, w: usize, sigma_w2: f64, sigma_b2: f64) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; hw * hw];
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let valid = |v: usize, d: isize, n: usize| {
                let s = v as isize + d;
                (s >= 0 && s < n as isize).then_some(s as usize)
            };
            for y in 0..h {
                let Some(sy) = valid(y, dy, h) else { continue };
                for x in 0..w {
                    let Some(sx) = valid(x, dx, w) else { continue };
                    let dst = &mut out[(y * w + x) * hw..][..hw];
                    let src = &r[(sy * w + sx) * hw..][..hw];
                    for y2 in 0..h {
                        let Some(sy2) = valid(y2, dy, h) else { continue };
                        let (x_lo, x_hi) = match dx {
                            -1 => (1, w),
                            0 => (0, w),
                            _ => (0, w - 1),
                        };
                        let d_row = &mut dst[y2 * w..(y2 + 1) * w];
                        let s_row = &src[sy2 * w..(sy2 + 1) * w];
                        for x2 in x_lo..x_hi {
                            d_row[x2] += s_row[(x2 as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    let c = sigma_w2 / 9.0;
    out.iter_mut().for_each(|v| *v = *v * c + sigma_b2);
    out
}

fn pool_cov(r: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let (hw, ohw) = (h * w, oh * ow);
    let mut out = vec![0.0; ohw * ohw];
    for q in 0..ohw {
        let (qy, qx) = (q / ow, q % ow);
        for q2 in 0..ohw {
            let (qy2, qx2) = (q2 / ow, q2 % ow);
            let mut acc = 0.0;
            for a in 0..4 {
                let p = (2 * qy + a / 2) * w + 2 * qx + a % 2;
                let row = &r[p * hw..];
                for b in 0..4 {
                    acc += row[(2 * qy2 + b / 2) * w + 2 * qx2 + b % 2];
                }
            }
            out[q * ohw + q2] = acc / 16.0;
        }
    }
    out
}

/// Cross-covariance propagation. With `diag = None` the two images are the
/// same and the variances are read off the running diagonal and recorded.
fn propagate(
    spec: &NetworkSpec,
    x: &[f64],
    y: &[f64],
    diag: Option<(&ConvGpDiagonal, &ConvGpDiagonal)>,
    record: &mut Vec<Vec<f64>>,
) -> Result<f64> {
    let c = spec.input.channels;
    let (mut h, mut w) = (spec.input.height, spec.input.width);
    let hw = h * w;
    let mut r = vec![0.0; hw * hw];
    for p in 0..hw {
        for p2 in 0..hw {
            r[p * hw + p2] = (0..c).map(|ch| x[ch * hw + p] * y[ch * hw + p2]).sum::<f64>() / c as f64;
        }
    }
    for layer in 0..spec.depth {
        let sigma = conv_cov(&r, h, w, spec.sigma_w2, spec.sigma_b2);
        let n = h * w;
        let (vx, vy): (Vec<f64>, Vec<f64>) = match diag {
            Some((dx, dy)) => (dx.layers[layer].clone(), dy.layers[layer].clone()),
            None => {
                let d: Vec<f64> = (0..n).map(|p| sigma[p * n + p]).collect();
                record.push(d.clone());
                (d.clone(), d)
            }
        };
        let mut post = sigma;
        for p in 0..n {
            for p2 in 0..n {
                let idx = p * n + p2;
                post[idx] = relu_arccos_step(vx[p], vy[p2], post[idx], 1.0, 0.0)?.0;
            }
        }
        r = pool_cov(&post, h, w);
        h /= 2;
        w /= 2;
    }
    let n = h * w;
    let trace: f64 = (0..n).map(|p| r[p * n + p]).sum();
    Ok(spec.sigma_w2 * trace / n as f64 + spec.sigma_b2)
}

/// Per-image variances needed by [`conv_nngp_entry`], plus `k(x, x)`.
pub fn conv_nngp_diagonal(spec: &NetworkSpec, x: &[f64]) -> Result<ConvGpDiagonal> {
    check_spec(spec)?;
    let mut layers = Vec::with_capacity(spec.depth);
    let kernel = propagate(spec, x, x, None, &mut layers)?;
    Ok(ConvGpDiagonal { layers, kernel })
}

/// One kernel entry `k(x, y)` given both images' diagonals.
pub fn conv_nngp_entry(
    spec: &NetworkSpec,
    x: &[f64],
    y: &[f64],
    dx: &ConvGpDiagonal,
    dy: &ConvGpDiagonal,
) -> Result<f64> {
    check_spec(spec)?;
    propagate(spec, x, y, Some((dx, dy)), &mut Vec::new())
}

/// Exact conv NNGP matrix between two image batches.
pub fn exact_conv_nngp<T: Scalar>(spec: &NetworkSpec, xa: &Tensor<T>, xb: &Tensor<T>) -> Result<Tensor<f64>> {
    check_spec(spec)?;
    let d = spec.input.numel();
    let rows = |t: &Tensor<T>| -> Result<Vec<Vec<f64>>> {
        if t.len() % d.max(1) != 0 || t.shape()[1..].iter().product::<usize>() != d {
            return Err(Error::dim("exact_conv_nngp", "image size", d, t.len() / t.shape()[0].max(1)));
        }
        Ok(t.to_f64_vec().chunks(d).map(<[f64]>::to_vec).collect())
    };
    let (a, b) = (rows(xa)?, rows(xb)?);
    let da = a.iter().map(|x| conv_nngp_diagonal(spec, x)).collect::<Result<Vec<_>>>()?;
    let db = b.iter().map(|x| conv_nngp_diagonal(spec, x)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(a.len() * b.len());
    for (x, dx) in a.iter().zip(&da) {
        for (y, dy) in b.iter().zip(&db) {
            out.push(conv_nngp_entry(spec, x, y, dx, dy)?);
        }
    }
    Tensor::new(&[a.len(), b.len()], out)
}
