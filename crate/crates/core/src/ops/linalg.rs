//! Dense Cholesky factorization and SPD solves, always in double precision.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower Cholesky factor (row-major) of the `n x n` matrix `a`.
///
/// Only the lower triangle of `a` is read.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let (li, lj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let dot: f64 = li.iter().zip(lj).map(|(x, y)| x * y).sum();
            let s = a[i * n + j] - dot;
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Singular { pivot: i, value: s });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` in place, `B` row-major `n x m`.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    // L Y = B
    for i in 0..n {
        let (done, rest) = b.split_at_mut(i * m);
        let yi = &mut rest[..m];
        for k in 0..i {
            let lik = l[i * n + k];
            if lik != 0.0 {
                for (v, &yk) in yi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                    *v -= lik * yk;
                }
            }
        }
        let d = l[i * n + i];
        yi.iter_mut().for_each(|v| *v /= d);
    }
    // Lᵀ X = Y
    for i in (0..n).rev() {
        let (head, tail) = b.split_at_mut((i + 1) * m);
        let xi = &mut head[i * m..];
        for k in i + 1..n {
            let lki = l[k * n + i];
            if lki != 0.0 {
                for (v, &xk) in xi.iter_mut().zip(&tail[(k - i - 1) * m..(k - i) * m]) {
                    *v -= lki * xk;
                }
            }
        }
        let d = l[i * n + i];
        xi.iter_mut().for_each(|v| *v /= d);
    }
}

/// Factor and solution of an SPD system, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SpdSolve {
    pub n: usize,
    pub m: usize,
    pub chol: Vec<f64>,
    pub x: Vec<f64>,
}

impl SpdSolve {
    pub fn new(a: &[f64], b: &[f64], n: usize, m: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::dim("solve_spd", "A", n * n, a.len()));
        }
        if b.len() != n * m {
            return Err(Error::dim("solve_spd", "B rows", n, b.len() / m.max(1)));
        }
        let chol = cholesky(a, n)?;
        let mut x = b.to_vec();
        cholesky_solve(&chol, n, &mut x, m);
        Ok(Self { n, m, chol, x })
    }

    /// `A⁻¹ G` for another right-hand side of the same width.
    pub fn apply_inverse(&self, g: &[f64]) -> Vec<f64> {
        let mut out = g.to_vec();
        cholesky_solve(&self.chol, self.n, &mut out, self.m);
        out
    }

    /// Gradients `(dA, dB)` for upstream gradient `g` on `X`.
    ///
    /// `dB = A⁻¹ g` and `dA = -dB Xᵀ`, symmetrized because only symmetric
    /// perturbations of `A` are meaningful.
    pub fn backward(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (self.n, self.m);
        let db = self.apply_inverse(g);
        let mut da = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..m).map(|c| db[i * m + c] * self.x[j * m + c]).sum();
                da[i * n + j] = -s;
            }
        }
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (da[i * n + j] + da[j * n + i]);
                da[i * n + j] = avg;
                da[j * n + i] = avg;
            }
        }
        (da, db)
    }
}

/// Solves `A X = B` for symmetric positive definite `A`.
///
/// The factorization always runs in `f64`; the result is returned in the
/// caller's precision.
pub fn solve_spd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, n2) = a.dims2("solve_spd")?;
    if n != n2 {
        return Err(Error::dim("solve_spd", "A columns", n, n2));
    }
    let (bn, m) = b.dims2("solve_spd")?;
    if bn != n {
        return Err(Error::dim("solve_spd", "B rows", n, bn));
    }
    let s = SpdSolve::new(&a.to_f64_vec(), &b.to_f64_vec(), n, m)?;
    Tensor::<f64>::new(&[n, m], s.x).map(|t| t.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_returns_rhs() {
        let b = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 - 1.5);
        assert_eq!(solve_spd(&Tensor::eye(3), &b).unwrap(), b);
    }

    #[test]
    fn diagonal_system() {
        let a = Tensor::<f64>::new(&[2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![2.0, 4.0]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!(x.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2, 1]);
        match solve_spd(&a, &b) {
            Err(Error::Singular { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn residual_is_small_for_random_spd() {
        let n = 20;
        let g = Tensor::<f64>::from_fn(&[n, n], |i| ((i * 7919 % 101) as f64) / 50.0 - 1.0);
        let mut a = g.matmul(&g.transpose().unwrap()).unwrap();
        for i in 0..n {
            a.set2(i, i, a.get2(i, i) + 1.0);
        }
        let b = Tensor::from_fn(&[n, 3], |i| (i as f64).cos());
        let x = solve_spd(&a, &b).unwrap();
        let r = a.matmul(&x).unwrap();
        assert!(r.max_abs_diff(&b) < 1e-10);
    }
}
