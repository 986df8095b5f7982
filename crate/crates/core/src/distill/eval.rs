use serde::{Deserialize, Serialize};

use super::Coreset;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{exact_fc_kernels, gram, random_feature_map};
use crate::krr;
use crate::networks::{Architecture, NetworkEnsemble, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel used to score a finished coreset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvalKernel {
    /// Random-feature NNGP from `n_models` fresh networks of width `channels`.
    Empirical {
        n_models: usize,
        channels: usize,
        seed: u64,
    },
    ExactFcNngp,
    ExactFcNtk,
}

impl EvalKernel {
    fn check_arch(&self, spec: &NetworkSpec) -> Result<()> {
        match self {
            EvalKernel::Empirical { n_models, channels, .. } => {
                if *n_models == 0 || *channels == 0 {
                    return Err(Error::Config("evaluation ensemble must be non-empty".into()));
                }
                Ok(())
            }
            _ if spec.arch != Architecture::Fc => Err(Error::Config(format!(
                "exact FC kernels cannot evaluate a {:?} coreset; use the empirical kernel",
                spec.arch
            ))),
            _ => Ok(()),
        }
    }
}

fn accumulate(acc: &mut Tensor<f64>, part: &Tensor<impl Scalar>, scale: f64) {
    for (a, p) in acc.data_mut().iter_mut().zip(part.data()) {
        *a += p.to_f64_lossy() * scale;
    }
}

/// `(K_qS, K_SS)` for each coreset, against a shared query set.
///
/// The empirical kernel is accumulated one network at a time so query
/// features are computed once per network for all coresets.
pub fn support_kernels<T: Scalar>(
    coresets: &[&Coreset<T>],
    queries: &Tensor<T>,
    kernel: EvalKernel,
) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
    let Some(first) = coresets.first() else {
        return Ok(Vec::new());
    };
    for c in coresets {
        kernel.check_arch(&c.spec)?;
        if c.spec.arch != first.spec.arch || c.spec.input != first.spec.input {
            return Err(Error::Config("coresets use different architectures".into()));
        }
    }
    let supports: Vec<Tensor<T>> = coresets
        .iter()
        .map(|c| c.effective_images())
        .collect::<Result<_>>()?;
    let q = queries.shape()[0];

    match kernel {
        EvalKernel::Empirical {
            n_models,
            channels,
            seed,
        } => {
            let spec = NetworkSpec {
                channels,
                ..first.spec.clone()
            };
            let ensemble = NetworkEnsemble::<T>::sample(&spec, n_models, seed)?;
            let mut out: Vec<(Tensor<f64>, Tensor<f64>)> = supports
                .iter()
                .map(|s| {
                    let n = s.shape()[0];
                    (Tensor::zeros(&[q, n]), Tensor::zeros(&[n, n]))
                })
                .collect();
            let w = 1.0 / n_models as f64;
            for member in &ensemble.members {
                let single = NetworkEnsemble {
                    spec: spec.clone(),
                    members: vec![member.clone()],
                    seed: ensemble.seed,
                };
                let fq = random_feature_map(&single, queries)?;
                for (s, (kq, kss)) in supports.iter().zip(out.iter_mut()) {
                    let fs = random_feature_map(&single, s)?;
                    accumulate(kq, &gram(&fq, &fs)?, w);
                    accumulate(kss, &gram(&fs, &fs)?, w);
                }
            }
            Ok(out)
        }
        EvalKernel::ExactFcNngp | EvalKernel::ExactFcNtk => supports
            .iter()
            .map(|s| {
                let spec = &first.spec;
                let cross = exact_fc_kernels(queries, s, spec.depth, spec.sigma_w2, spec.sigma_b2)?;
                let own = exact_fc_kernels(s, s, spec.depth, spec.sigma_w2, spec.sigma_b2)?;
                Ok(match kernel {
                    EvalKernel::ExactFcNtk => (cross.ntk, own.ntk),
                    _ => (cross.nngp, own.nngp),
                })
            })
            .collect(),
    }
}

/// Top-1 test accuracy of KRR on each coreset.
pub fn evaluate_many<T: Scalar>(
    coresets: &[&Coreset<T>],
    test: &Dataset<T>,
    kernel: EvalKernel,
    lambda0: f64,
) -> Result<Vec<f64>> {
    let kernels = support_kernels(coresets, &test.images, kernel)?;
    coresets
        .iter()
        .zip(kernels)
        .map(|(c, (kq, kss))| {
            let sol = krr::krr_fit(&kss, &c.labels.cast::<f64>(), lambda0)?;
            let preds = krr::krr_predict(&kq, &sol)?;
            Ok(krr::accuracy(&preds, &test.labels))
        })
        .collect()
}

pub fn evaluate_coreset<T: Scalar>(
    coreset: &Coreset<T>,
    test: &Dataset<T>,
    kernel: EvalKernel,
    lambda0: f64,
) -> Result<f64> {
    Ok(evaluate_many(&[coreset], test, kernel, lambda0)?[0])
}
