use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise log-softmax, stabilized by subtracting the row max.
pub fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2("log_softmax")?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(log_softmax_rows(logits)?.map(|v| v.exp()))
}

/// Mean over rows of `-sum_c targets * log_softmax(logits)`.
///
/// Returns the loss and the softmax probabilities needed for the backward pass.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::dim(
            "softmax_cross_entropy",
            "targets",
            format!("{:?}", logits.shape()),
            format!("{:?}", targets.shape()),
        ));
    }
    let (b, _) = logits.dims2("softmax_cross_entropy")?;
    let logp = log_softmax_rows(logits)?;
    let total: T = logp
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&lp, &t)| -lp * t)
        .sum();
    Ok((total / T::from_usize(b.max(1)).unwrap(), logp.map(|v| v.exp())))
}

/// d loss / d logits = (p * sum_c t - t) / B.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    upstream: T,
) -> Tensor<T> {
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream / T::from_usize(b.max(1)).unwrap();
    let mut g = Tensor::zeros(probs.shape());
    for ((gr, pr), tr) in g
        .data_mut()
        .chunks_mut(c)
        .zip(probs.data().chunks(c))
        .zip(targets.data().chunks(c))
    {
        let tsum: T = tr.iter().copied().sum();
        for j in 0..c {
            gr[j] = (pr[j] * tsum - tr[j]) * scale;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::full(&[2, 10], 3.0);
        let mut t = Tensor::zeros(&[2, 10]);
        t.set2(0, 3, 1.0);
        t.set2(1, 7, 1.0);
        let (l, _) = softmax_cross_entropy(&logits, &t).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn huge_margin_saturates() {
        let logits = Tensor::<f64>::new(&[1, 3], vec![1000.0, 0.0, 0.0]).unwrap();
        let t = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let (l, _) = softmax_cross_entropy(&logits, &t).unwrap();
        assert!(l.abs() < 1e-300);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let logits = Tensor::<f64>::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        let t = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &t),
            Err(Error::NonFinite(_))
        ));
    }
}
