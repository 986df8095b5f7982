use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One ReLU layer of the arc-cosine recursion.
///
/// Given the pre-activation covariance `(k_xx, k_yy, k_xy)`, returns the next
/// layer's covariance `k'_xy` and the derivative kernel `k̇_xy`.
pub fn relu_arccos_step(
    k_xx: f64,
    k_yy: f64,
    k_xy: f64,
    sigma_w2: f64,
    sigma_b2: f64,
) -> Result<(f64, f64)> {
    if !(k_xx > 0.0) || !(k_yy > 0.0) {
        return Err(Error::Domain(format!(
            "arc-cosine step needs positive variances, got ({k_xx}, {k_yy})"
        )));
    }
    let norm = (k_xx * k_yy).sqrt();
    let cos = k_xy / norm;
    if !cos.is_finite() || cos.abs() > 1.0 + 1e-6 {
        return Err(Error::NonFinite("arc-cosine correlation"));
    }
    let cos = cos.clamp(-1.0, 1.0);
    let theta = cos.acos();
    let k = sigma_b2 + sigma_w2 * norm * (theta.sin() + (PI - theta) * cos) / (2.0 * PI);
    let k_dot = sigma_w2 * (PI - theta) / (2.0 * PI);
    Ok((k, k_dot))
}

/// NNGP and NTK matrices between two input sets.
#[derive(Clone, Debug)]
pub struct FcKernels {
    pub nngp: Tensor<f64>,
    pub ntk: Tensor<f64>,
}

fn flatten<T: Scalar>(x: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let b = x.shape()[0];
    let d = if b == 0 { 0 } else { x.len() / b };
    (b, d, x.to_f64_vec())
}

/// Exact FC ReLU kernels of depth `depth` between rows of `xa` and `xb`.
///
/// Inputs of any rank are flattened per leading index. `K⁰ = σ_b² + σ_w² x·x'/d`
/// followed by `depth - 1` arc-cosine steps; the NTK runs alongside with
/// `Θ⁰ = K⁰`, `Θˡ = Kˡ + K̇ˡ ⊙ Θˡ⁻¹`.
pub fn exact_fc_kernels<T: Scalar>(
    xa: &Tensor<T>,
    xb: &Tensor<T>,
    depth: usize,
    sigma_w2: f64,
    sigma_b2: f64,
) -> Result<FcKernels> {
    if depth == 0 {
        return Err(Error::Config("kernel depth must be at least 1".into()));
    }
    let (na, d, a) = flatten(xa);
    let (nb, db, b) = flatten(xb);
    if d != db {
        return Err(Error::dim("exact_fc_kernels", "features", d, db));
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let base = |u: &[f64], v: &[f64]| sigma_b2 + sigma_w2 * dot(u, v) / d as f64;

    let mut kaa: Vec<f64> = a.chunks(d.max(1)).take(na).map(|r| base(r, r)).collect();
    let mut kbb: Vec<f64> = b.chunks(d.max(1)).take(nb).map(|r| base(r, r)).collect();
    let mut k = vec![0.0; na * nb];
    for i in 0..na {
        for j in 0..nb {
            k[i * nb + j] = base(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
        }
    }
    let mut theta = k.clone();
    for _ in 1..depth {
        for i in 0..na {
            for j in 0..nb {
                let idx = i * nb + j;
                let (kn, kdot) = relu_arccos_step(kaa[i], kbb[j], k[idx], sigma_w2, sigma_b2)?;
                k[idx] = kn;
                theta[idx] = kn + kdot * theta[idx];
            }
        }
        for v in kaa.iter_mut().chain(kbb.iter_mut()) {
            *v = sigma_b2 + sigma_w2 * *v / 2.0;
        }
    }
    Ok(FcKernels {
        nngp: Tensor::new(&[na, nb], k)?,
        ntk: Tensor::new(&[na, nb], theta)?,
    })
}

pub fn exact_nngp_fc<T: Scalar>(
    x: &Tensor<T>,
    depth: usize,
    sigma_w2: f64,
    sigma_b2: f64,
) -> Result<Tensor<f64>> {
    Ok(exact_fc_kernels(x, x, depth, sigma_w2, sigma_b2)?.nngp)
}

pub fn exact_ntk_fc<T: Scalar>(
    x: &Tensor<T>,
    depth: usize,
    sigma_w2: f64,
    sigma_b2: f64,
) -> Result<Tensor<f64>> {
    Ok(exact_fc_kernels(x, x, depth, sigma_w2, sigma_b2)?.ntk)
}
