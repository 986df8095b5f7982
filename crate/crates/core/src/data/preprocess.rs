use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{Dataset, Preprocessing};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Global scalar standardization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit<T: Scalar>(images: &Tensor<T>) -> Result<Self> {
        let n = images.len().max(1) as f64;
        let mean = images.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
        let var = images
            .data()
            .iter()
            .map(|v| (v.to_f64_lossy() - mean).powi(2))
            .sum::<f64>()
            / n;
        if !(var > 0.0) {
            return Err(Error::Data("cannot standardize zero-variance data".into()));
        }
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn apply<T: Scalar>(&self, images: &Tensor<T>) -> Tensor<T> {
        let (m, inv) = (self.mean, 1.0 / self.std);
        images.map(|v| T::from_f64_lossy((v.to_f64_lossy() - m) * inv))
    }
}

/// Fits a standardizer on `ds` and returns the transformed copy.
pub fn standardize<T: Scalar>(ds: &Dataset<T>) -> Result<Dataset<T>> {
    let s = Standardizer::fit(&ds.images)?;
    Ok(Dataset {
        images: s.apply(&ds.images),
        preprocessing: Preprocessing::Standardize(s),
        ..ds.clone()
    })
}

/// Regularized ZCA whitening `x ↦ W (x - mean)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    /// Symmetric `[d, d]`, row-major.
    pub w: Vec<f64>,
    pub dim: usize,
    pub lambda: f64,
}

/// Eigendecomposes the covariance `Σ = U Λ Uᵀ` of the centered rows and sets
/// `W = U diag((λ_i + λ·mean(Λ))^(-1/2)) Uᵀ`.
pub fn zca_fit<T: Scalar>(images: &Tensor<T>, lambda: f64) -> Result<ZcaTransform> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Data("cannot fit ZCA on an empty set".into()));
    }
    let d = images.len() / n;
    let x = images.to_f64_vec();
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let mut cov = vec![0.0; d * d];
    f64::gemm(
        d,
        n,
        d,
        1.0 / n as f64,
        &centered,
        1,
        d as isize,
        &centered,
        d as isize,
        1,
        0.0,
        &mut cov,
        d as isize,
        1,
    );
    let eig = SymmetricEigen::try_new(DMatrix::from_row_slice(d, d, &cov), 1e-12, 10_000)
        .ok_or_else(|| Error::Data("ZCA eigendecomposition did not converge".into()))?;
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let shift = lambda * vals.iter().sum::<f64>() / d as f64;
    let scale: Vec<f64> = vals.iter().map(|&v| (v + shift).powf(-0.5)).collect();
    if scale.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data(
            "ZCA whitening is singular; use a positive regularizer".into(),
        ));
    }
    let u = &eig.eigenvectors;
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v: f64 = (0..d).map(|k| u[(i, k)] * scale[k] * u[(j, k)]).sum();
            w[i * d + j] = v;
            w[j * d + i] = v;
        }
    }
    Ok(ZcaTransform {
        mean,
        w,
        dim: d,
        lambda,
    })
}

impl ZcaTransform {
    /// Applies the whitening to every row; the leading axis is the sample axis.
    pub fn apply<T: Scalar>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let d = self.dim;
        if n * d != images.len() {
            return Err(Error::dim("zca_apply", "features", d, images.len() / n.max(1)));
        }
        let centered: Vec<f64> = images
            .to_f64_vec()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&self.mean).map(|(v, m)| v - m).collect::<Vec<_>>())
            .collect();
        let mut out = vec![0.0; n * d];
        f64::gemm(
            n, d, d, 1.0, &centered, d as isize, 1, &self.w, d as isize, 1, 0.0, &mut out,
            d as isize, 1,
        );
        Tensor::new(images.shape(), out.into_iter().map(T::from_f64_lossy).collect())
    }

    /// `W⁻¹ y + mean`.
    pub fn invert<T: Scalar>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.dim;
        let inv = DMatrix::from_row_slice(d, d, &self.w)
            .try_inverse()
            .ok_or_else(|| Error::Data("ZCA matrix is not invertible".into()))?;
        let out: Vec<T> = images
            .to_f64_vec()
            .chunks_exact(d)
            .flat_map(|row| {
                let y = nalgebra::DVector::from_column_slice(row);
                let x = &inv * y;
                x.iter()
                    .zip(&self.mean)
                    .map(|(v, m)| T::from_f64_lossy(v + m))
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(images.shape(), out)
    }
}
