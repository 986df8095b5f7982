use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::networks::{self, NetworkEnsemble, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which ensemble and which inputs produced a feature matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub ensemble: u64,
    pub batch: u64,
}

/// Scaled random features `Φ̂ ∈ R^{NM x B}`; column `j` belongs to input `j`.
#[derive(Clone, Debug)]
pub struct FeatureMatrix<T> {
    pub values: Tensor<T>,
    pub provenance: Provenance,
    pub stop_gradient: bool,
}

/// A feature matrix living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TrackedFeatures {
    pub var: Var,
    pub provenance: Provenance,
    pub stop_gradient: bool,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    /// Moves the matrix onto a tape as a stop-gradient leaf.
    pub fn onto_tape(self, tape: &mut Tape<T>) -> TrackedFeatures {
        TrackedFeatures {
            var: tape.constant(self.values),
            provenance: self.provenance,
            stop_gradient: true,
        }
    }
}

/// FNV-1a over the raw bits; identifies an input batch.
pub(crate) fn batch_hash<T: Scalar>(x: &Tensor<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &d in x.shape() {
        h = (h ^ d as u64).wrapping_mul(0x100_0000_01b3);
    }
    for v in x.data() {
        h = (h ^ v.to_f64_lossy().to_bits()).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Images per forward chunk, keeping the widest activation near 32M scalars.
fn chunk_rows(spec: &NetworkSpec) -> usize {
    let per_image = spec.channels.max(spec.input.channels) * spec.input.height * spec.input.width;
    (32_000_000 / per_image.max(1)).clamp(1, 4096)
}

/// Plain (untracked) features of one network over `x`, in chunks.
fn member_features<T: Scalar>(
    spec: &NetworkSpec,
    params: &networks::NetworkParams<T>,
    x: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    let b = x.shape()[0];
    let m = spec.feature_dim();
    let chunk = chunk_rows(spec);
    let mut out = Tensor::zeros(&[m, b]);
    let mut start = 0;
    while start < b {
        let end = (start + chunk).min(b);
        let idx: Vec<usize> = (start..end).collect();
        let part = networks::forward_features(spec, params, &x.select_rows(&idx))?;
        let w = end - start;
        for r in 0..m {
            let src = &part.data()[r * w..(r + 1) * w];
            let dst = &mut out.data_mut()[r * b + start..r * b + end];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale;
            }
        }
        start = end;
    }
    Ok(out)
}

/// Stacks every member's features and scales by `1/√N`, so that
/// `E[Φ̂ᵀ Φ̂]` is the NNGP kernel of the architecture.
pub fn random_feature_map<T: Scalar>(
    ensemble: &NetworkEnsemble<T>,
    x: &Tensor<T>,
) -> Result<FeatureMatrix<T>> {
    let n = ensemble.len();
    let scale = T::from_f64_lossy(1.0 / (n as f64).sqrt());
    let parts: Vec<Tensor<T>> = ensemble
        .members
        .par_iter()
        .map(|p| member_features(&ensemble.spec, p, x, scale))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(FeatureMatrix {
        values: Tensor::concat_rows(&refs)?,
        provenance: Provenance {
            ensemble: ensemble.id(),
            batch: batch_hash(x),
        },
        stop_gradient: true,
    })
}

/// Differentiable counterpart of [`random_feature_map`]: gradients flow into `x`.
pub fn feature_map_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ensemble: &NetworkEnsemble<T>,
    x: Var,
) -> Result<TrackedFeatures> {
    let spec = &ensemble.spec;
    let n = ensemble.len();
    let b = tape.value(x).shape()[0];
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let batch = batch_hash(tape.value(x));
    let mut parts = Vec::with_capacity(n);
    for member in &ensemble.members {
        let layers: Vec<(Var, Var)> = member
            .layers
            .iter()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
            .collect();
        let rep = networks::forward_tape(spec, tape, &layers, x)?;
        let t = tape.transpose(rep)?;
        if spec.use_final_fc {
            parts.push(tape.scale(t, T::from_f64_lossy(inv_sqrt_n)));
            continue;
        }
        let dim = tape.value(rep).shape()[1];
        let s = (spec.sigma_w2 / dim as f64).sqrt() * inv_sqrt_n;
        parts.push(tape.scale(t, T::from_f64_lossy(s)));
        let bias = T::from_f64_lossy(spec.sigma_b2.sqrt() * inv_sqrt_n);
        parts.push(tape.constant(Tensor::full(&[1, b], bias)));
    }
    let var = tape.concat_rows(&parts)?;
    Ok(TrackedFeatures {
        var,
        provenance: Provenance {
            ensemble: ensemble.id(),
            batch,
        },
        stop_gradient: !tape.requires_grad(var),
    })
}

fn check_same_ensemble(a: Provenance, b: Provenance) -> Result<()> {
    if a.ensemble != b.ensemble {
        return Err(Error::Provenance(format!(
            "features from ensemble {:#x} and {:#x} cannot be combined",
            a.ensemble, b.ensemble
        )));
    }
    Ok(())
}

/// `Φ_aᵀ Φ_b`.
pub fn gram<T: Scalar>(a: &FeatureMatrix<T>, b: &FeatureMatrix<T>) -> Result<Tensor<T>> {
    check_same_ensemble(a.provenance, b.provenance)?;
    if a.rows() != b.rows() {
        return Err(Error::dim("gram", "feature rows", a.rows(), b.rows()));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.values.data(),
        1,
        m as isize,
        b.values.data(),
        n as isize,
        1,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    let mut g = Tensor::new(&[m, n], out)?;
    if a.provenance == b.provenance {
        symmetrize(&mut g);
    }
    Ok(g)
}

/// Mirrors the upper triangle so `gram(Φ, Φ)` is exactly symmetric.
fn symmetrize<T: Scalar>(g: &mut Tensor<T>) {
    let n = g.shape()[0];
    for i in 0..n {
        for j in 0..i {
            let v = g.get2(j, i);
            g.set2(i, j, v);
        }
    }
}

/// Tape-tracked `Φ_aᵀ Φ_b`; gradients reach only tracked operands.
pub fn gram_tape<T: Scalar>(
    tape: &mut Tape<T>,
    a: &TrackedFeatures,
    b: &TrackedFeatures,
) -> Result<Var> {
    check_same_ensemble(a.provenance, b.provenance)?;
    let at = tape.transpose(a.var)?;
    tape.matmul(at, b.var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::InputShape;

    fn toy() -> (NetworkEnsemble<f64>, Tensor<f64>) {
        let spec = NetworkSpec::convnet3(4, InputShape::new(1, 8, 8));
        let ens = NetworkEnsemble::sample(&spec, 3, 5).unwrap();
        let x = Tensor::from_fn(&[5, 1, 8, 8], |i| ((i * 17 % 13) as f64 - 6.0) / 3.0);
        (ens, x)
    }

    #[test]
    fn single_network_matches_member_features() {
        let (ens, x) = toy();
        let one = NetworkEnsemble {
            members: vec![ens.members[0].clone()],
            ..ens.clone()
        };
        let f = random_feature_map(&one, &x).unwrap();
        let direct = networks::forward_features(&one.spec, &one.members[0], &x).unwrap();
        assert_eq!(f.values, direct);
    }

    #[test]
    fn duplicate_inputs_give_duplicate_columns() {
        let (ens, x) = toy();
        let xd = x.select_rows(&[0, 1, 0]);
        let f = random_feature_map(&ens, &xd).unwrap();
        let k = gram(&f, &f).unwrap();
        for j in 0..3 {
            assert_eq!(k.get2(0, j), k.get2(2, j));
        }
    }

    #[test]
    fn gram_diagonal_is_squared_norm_and_matches_naive() {
        let (ens, x) = toy();
        let f = random_feature_map(&ens, &x).unwrap();
        let k = gram(&f, &f).unwrap();
        let (rows, cols) = (f.rows(), f.cols());
        for i in 0..cols {
            for j in 0..cols {
                let naive: f64 = (0..rows)
                    .map(|r| f.values.get2(r, i) * f.values.get2(r, j))
                    .sum();
                assert!((k.get2(i, j) - naive).abs() < 1e-10);
            }
        }
        for i in 0..cols {
            assert_eq!(k.get2(i, i), k.get2(i, i));
            assert_eq!(k.get2(i, (i + 1) % cols), k.get2((i + 1) % cols, i));
        }
    }

    #[test]
    fn orthogonal_columns_have_zero_off_diagonal() {
        let values = Tensor::<f64>::new(&[3, 2], vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let p = Provenance { ensemble: 1, batch: 1 };
        let f = FeatureMatrix { values, provenance: p, stop_gradient: true };
        let k = gram(&f, &f).unwrap();
        assert_eq!(k.data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn mismatched_ensembles_are_rejected() {
        let (ens, x) = toy();
        let other = NetworkEnsemble::sample(&ens.spec, 3, 6).unwrap();
        let a = random_feature_map(&ens, &x).unwrap();
        let b = random_feature_map(&other, &x).unwrap();
        assert!(matches!(gram(&a, &b), Err(Error::Provenance(_))));
    }

    #[test]
    fn tape_features_match_plain_features() {
        let (ens, x) = toy();
        let plain = random_feature_map(&ens, &x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let tracked = feature_map_tape(&mut tape, &ens, xv).unwrap();
        assert!(!tracked.stop_gradient);
        assert!(tape.value(tracked.var).max_abs_diff(&plain.values) < 1e-14);
    }
}
