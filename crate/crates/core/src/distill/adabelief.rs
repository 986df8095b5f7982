use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// AdaBelief state for one parameter tensor.
///
/// `m ← β1 m + (1-β1) g`, `s ← β2 s + (1-β2)(g-m)² + ε`, and the
/// bias-corrected step `p ← p - lr · m̂ / (√ŝ + ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaBelief {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub step: u64,
}

impl AdaBelief {
    pub fn new(len: usize, lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: vec![0.0; len],
            s: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update<T: Scalar>(&mut self, param: &mut [T], grad: &[T]) {
        assert_eq!(param.len(), self.m.len(), "parameter length changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), s) in param
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.s.iter_mut())
        {
            let g = g.to_f64_lossy();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *s = self.beta2 * *s + (1.0 - self.beta2) * (g - *m).powi(2) + self.eps;
            let step = self.lr * (*m / bc1) / ((*s / bc2).sqrt() + self.eps);
            *p = T::from_f64_lossy(p.to_f64_lossy() - step);
        }
    }
}
