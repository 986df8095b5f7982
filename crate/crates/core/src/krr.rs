//! Kernel ridge regression head and the training losses built on it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, linalg::SpdSolve};
use crate::scalar::Scalar;
use crate::tensor::{argmax_rows, Tensor};

/// `λ0 · mean(diag K)`: a regularizer that scales with the kernel.
pub fn adaptive_lambda<T: Scalar>(k_ss: &Tensor<T>, lambda0: f64) -> f64 {
    let n = k_ss.shape()[0];
    if n == 0 {
        return 0.0;
    }
    let trace: f64 = (0..n).map(|i| k_ss.get2(i, i).to_f64_lossy()).sum();
    lambda0 * trace / n as f64
}

/// Dual coefficients of a fitted KRR model.
#[derive(Clone, Debug)]
pub struct KrrSolution {
    /// `(K_SS + λ I)⁻¹ y_S`, shape `[S, C]`, kept in double precision.
    pub alpha: Tensor<f64>,
    pub lambda_effective: f64,
    pub labels: Tensor<f64>,
}

/// Solves `(K_SS + λ I) α = y_S` with the adaptive `λ`.
pub fn krr_fit<T: Scalar>(k_ss: &Tensor<T>, y_s: &Tensor<T>, lambda0: f64) -> Result<KrrSolution> {
    let (s, s2) = k_ss.dims2("krr_fit")?;
    if s != s2 {
        return Err(Error::dim("krr_fit", "K_SS columns", s, s2));
    }
    let (ys, c) = y_s.dims2("krr_fit")?;
    if ys != s {
        return Err(Error::dim("krr_fit", "label rows", s, ys));
    }
    let lambda = adaptive_lambda(k_ss, lambda0);
    let mut a = k_ss.to_f64_vec();
    for i in 0..s {
        a[i * s + i] += lambda;
    }
    let solve = SpdSolve::new(&a, &y_s.to_f64_vec(), s, c)?;
    Ok(KrrSolution {
        alpha: Tensor::new(&[s, c], solve.x)?,
        lambda_effective: lambda,
        labels: y_s.cast(),
    })
}

/// `K_BS · α`.
pub fn krr_predict<T: Scalar>(k_bs: &Tensor<T>, sol: &KrrSolution) -> Result<Tensor<f64>> {
    let (_, s) = k_bs.dims2("krr_predict")?;
    let s_fit = sol.alpha.shape()[0];
    if s != s_fit {
        return Err(Error::dim("krr_predict", "K_BS columns", s_fit, s));
    }
    k_bs.cast::<f64>().matmul(&sol.alpha)
}

/// Learned temperature `τ = exp(log_tau)` for Platt scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattHead {
    pub log_tau: f64,
}

impl Default for PlattHead {
    fn default() -> Self {
        Self { log_tau: 0.0 }
    }
}

impl PlattHead {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

/// One-hot rows at the argmax of each label row.
pub fn one_hot_targets<T: Scalar>(y: &Tensor<T>) -> Tensor<T> {
    let c = y.shape()[1];
    let mut t = Tensor::zeros(y.shape());
    for (i, k) in argmax_rows(y).into_iter().enumerate() {
        t.data_mut()[i * c + k] = T::one();
    }
    t
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            "shape",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Cross-entropy of `softmax(preds / τ)` against the argmax classes of `y`.
pub fn platt_loss<T: Scalar>(preds: &Tensor<T>, y: &Tensor<T>, head: &PlattHead) -> Result<f64> {
    check_same_shape("platt_loss", preds, y)?;
    let logits = preds.cast::<f64>().scale(1.0 / head.tau());
    let (loss, _) = ops::softmax_cross_entropy(&logits, &one_hot_targets(&y.cast::<f64>()))?;
    Ok(loss)
}

pub fn mse_loss<T: Scalar>(preds: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_same_shape("mse_loss", preds, y)?;
    let n = preds.len().max(1) as f64;
    Ok(preds
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &t)| (p.to_f64_lossy() - t.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n)
}

/// `softmax(preds / τ)` row-wise.
pub fn predict_proba<T: Scalar>(preds: &Tensor<T>, head: &PlattHead) -> Result<Tensor<f64>> {
    ops::softmax_rows(&preds.cast::<f64>().scale(1.0 / head.tau()))
}

/// Top-1 accuracy of raw predictions against integer labels.
pub fn accuracy<T: Scalar>(preds: &Tensor<T>, labels: &[usize]) -> f64 {
    let pred = argmax_rows(preds);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Tape-tracked KRR prediction `K_BS (K_SS + λI)⁻¹ y_S`. Returns the
/// prediction and the effective `λ`.
pub fn krr_predict_tape<T: Scalar>(
    tape: &mut Tape<T>,
    k_bs: Var,
    k_ss: Var,
    y_s: Var,
    lambda0: f64,
) -> Result<(Var, f64)> {
    let (reg, lambda) = tape.add_ridge(k_ss, lambda0)?;
    let alpha = tape.solve_spd(reg, y_s)?;
    Ok((tape.matmul(k_bs, alpha)?, lambda))
}

/// Tape-tracked Platt loss; `log_tau` is a one-element variable.
pub fn platt_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    preds: Var,
    targets: Var,
    log_tau: Var,
) -> Result<Var> {
    let neg = tape.scale(log_tau, -T::one());
    let inv_tau = tape.exp(neg);
    let logits = tape.mul_scalar(preds, inv_tau)?;
    tape.softmax_cross_entropy(logits, targets)
}
