//! Randomly initialized finite networks used as NNGP feature samplers.
//!
//! Two families are supported: the three-block ConvNet (3x3 conv, ReLU,
//! 2x2 average pool per block) and a fully-connected ReLU stack. Weights use
//! the standard parameterization: `W ~ N(0, σ_w² / fan_in)`, `b ~ N(0, σ_b²)`.
//!
//! Without the final linear layer a network exposes its last post-ReLU
//! representation `φ` augmented to `[σ_w φ / √dim(φ) ; σ_b]`, whose inner
//! product is exactly `σ_w² ⟨φ, φ'⟩ / dim + σ_b²`: the covariance the
//! removed affine layer would have produced.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::{derive_seed, rng, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// `depth` blocks of conv → ReLU → 2x2 average pool.
    ConvNet,
    /// `depth - 1` hidden ReLU layers; the `depth`-th affine layer is implicit.
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Architecture,
    pub depth: usize,
    pub channels: usize,
    pub input: InputShape,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub use_final_fc: bool,
    /// Width of the final linear layer when `use_final_fc` is set.
    pub num_outputs: usize,
}

impl NetworkSpec {
    /// The ConvNet3 feature sampler with `σ_w² = 2`, `σ_b² = 0.1`.
    pub fn convnet3(channels: usize, input: InputShape) -> Self {
        Self {
            arch: Architecture::ConvNet,
            depth: 3,
            channels,
            input,
            sigma_w2: 2.0,
            sigma_b2: 0.1,
            use_final_fc: false,
            num_outputs: 0,
        }
    }

    pub fn fc(depth: usize, width: usize, input: InputShape) -> Self {
        Self {
            arch: Architecture::Fc,
            depth,
            channels: width,
            input,
            sigma_w2: 2.0,
            sigma_b2: 0.1,
            use_final_fc: false,
            num_outputs: 0,
        }
    }

    pub fn with_variances(mut self, sigma_w2: f64, sigma_b2: f64) -> Self {
        self.sigma_w2 = sigma_w2;
        self.sigma_b2 = sigma_b2;
        self
    }

    pub fn with_head(mut self, num_outputs: usize) -> Self {
        self.use_final_fc = true;
        self.num_outputs = num_outputs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_w2 > 0.0) || !(self.sigma_b2 >= 0.0) {
            return Err(Error::Config(format!(
                "variances must satisfy σ_w² > 0, σ_b² ≥ 0 (got {}, {})",
                self.sigma_w2, self.sigma_b2
            )));
        }
        if self.depth == 0 || self.channels == 0 {
            return Err(Error::Config("depth and channels must be positive".into()));
        }
        if self.use_final_fc && self.num_outputs == 0 {
            return Err(Error::Config("final layer needs num_outputs > 0".into()));
        }
        if self.arch == Architecture::ConvNet {
            let (mut h, mut w) = (self.input.height, self.input.width);
            for _ in 0..self.depth {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!(
                        "input {}x{} too small for {} pooling blocks",
                        self.input.height, self.input.width, self.depth
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// Spatial size after all pooling blocks.
    fn pooled_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input.height, self.input.width);
        for _ in 0..self.depth {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Length of the flattened last representation `φ`.
    pub fn representation_dim(&self) -> usize {
        match self.arch {
            Architecture::ConvNet => {
                let (h, w) = self.pooled_hw();
                self.channels * h * w
            }
            Architecture::Fc if self.depth == 1 => self.input.numel(),
            Architecture::Fc => self.channels,
        }
    }

    /// Features produced per network (`M`).
    pub fn feature_dim(&self) -> usize {
        if self.use_final_fc {
            self.num_outputs
        } else {
            self.representation_dim() + 1
        }
    }

    /// Shapes of every (weight, bias) pair in forward order.
    fn layer_shapes(&self) -> Vec<(Vec<usize>, usize)> {
        let mut shapes = Vec::new();
        match self.arch {
            Architecture::ConvNet => {
                let mut c_in = self.input.channels;
                for _ in 0..self.depth {
                    shapes.push((vec![self.channels, c_in, 3, 3], self.channels));
                    c_in = self.channels;
                }
            }
            Architecture::Fc => {
                let mut d_in = self.input.numel();
                for _ in 1..self.depth {
                    shapes.push((vec![d_in, self.channels], self.channels));
                    d_in = self.channels;
                }
            }
        }
        if self.use_final_fc {
            shapes.push((
                vec![self.representation_dim(), self.num_outputs],
                self.num_outputs,
            ));
        }
        shapes
    }

    fn is_conv_layer(&self, idx: usize) -> bool {
        self.arch == Architecture::ConvNet && idx < self.depth
    }

    /// Stable identity used for provenance and cache keys.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub layers: Vec<Layer<T>>,
    pub seed: u64,
}

/// Draws one network from the initialization distribution.
///
/// Values are drawn in `f64` and rounded, so `f32` and `f64` networks with the
/// same seed agree up to rounding.
pub fn sample_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> NetworkParams<T> {
    let mut r = rng(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(wshape, nb)| {
            let fan_in: usize = if wshape.len() == 4 {
                wshape[1] * 9
            } else {
                wshape[0]
            };
            let w_std = (spec.sigma_w2 / fan_in as f64).sqrt();
            let b_std = spec.sigma_b2.sqrt();
            let weight = Tensor::from_fn(&wshape, |_| {
                T::from_f64_lossy(w_std * std_normal.sample(&mut r))
            });
            let bias = Tensor::from_fn(&[nb], |_| {
                if b_std == 0.0 {
                    T::zero()
                } else {
                    T::from_f64_lossy(b_std * std_normal.sample(&mut r))
                }
            });
            Layer { weight, bias }
        })
        .collect();
    NetworkParams { layers, seed }
}

fn check_input<T: Scalar>(spec: &NetworkSpec, x: &Tensor<T>) -> Result<usize> {
    let (b, c, h, w) = x.dims4("forward_features")?;
    let i = spec.input;
    if c != i.channels {
        return Err(Error::dim("forward_features", "channels", i.channels, c));
    }
    if h != i.height {
        return Err(Error::dim("forward_features", "height", i.height, h));
    }
    if w != i.width {
        return Err(Error::dim("forward_features", "width", i.width, w));
    }
    Ok(b)
}

fn linear<T: Scalar>(x: &Tensor<T>, layer: &Layer<T>) -> Result<Tensor<T>> {
    let mut y = x.matmul(&layer.weight)?;
    let cols = layer.bias.len();
    for row in y.data_mut().chunks_mut(cols) {
        for (v, &b) in row.iter_mut().zip(layer.bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

/// Last representation `[B, dim]`, or head outputs `[B, num_outputs]` when
/// the spec has a final layer.
pub fn forward<T: Scalar>(spec: &NetworkSpec, params: &NetworkParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let b = check_input(spec, x)?;
    let mut h = x.clone();
    let mut layers = params.layers.iter().enumerate();
    match spec.arch {
        Architecture::ConvNet => {
            for (_, layer) in layers.by_ref().take(spec.depth) {
                h = ops::conv2d_relu_avgpool2(&h, &layer.weight, &layer.bias)?;
            }
            let dim = h.len() / b.max(1);
            h = h.reshape(&[b, dim])?;
        }
        Architecture::Fc => {
            h = h.reshape(&[b, spec.input.numel()])?;
            for (_, layer) in layers.by_ref().take(spec.depth - 1) {
                h = ops::relu(&linear(&h, layer)?);
            }
        }
    }
    if spec.use_final_fc {
        let (_, head) = layers.next().expect("head layer");
        h = linear(&h, head)?;
    }
    Ok(h)
}

/// Tape-tracked forward pass over layer variables `(weight, bias)`.
pub fn forward_tape<T: Scalar>(
    spec: &NetworkSpec,
    tape: &mut Tape<T>,
    layers: &[(Var, Var)],
    x: Var,
) -> Result<Var> {
    let b = check_input(spec, tape.value(x))?;
    let mut h = x;
    for (idx, &(w, bias)) in layers.iter().enumerate() {
        if spec.is_conv_layer(idx) {
            let z = tape.conv2d(h, w, bias)?;
            let r = tape.relu(z);
            h = tape.avgpool2(r)?;
            if idx + 1 == spec.depth {
                let dim = tape.value(h).len() / b.max(1);
                h = tape.reshape(h, &[b, dim])?;
            }
        } else {
            if tape.value(h).ndim() != 2 {
                h = tape.reshape(h, &[b, spec.input.numel()])?;
            }
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, bias)?;
            let is_head = spec.use_final_fc && idx + 1 == layers.len();
            h = if is_head { z } else { tape.relu(z) };
        }
    }
    if tape.value(h).ndim() != 2 {
        h = tape.reshape(h, &[b, spec.input.numel()])?;
    }
    Ok(h)
}

/// Per-network features `[M, B]`, before the `1/√N` ensemble scaling.
pub fn forward_features<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let rep = forward(spec, params, x)?;
    if spec.use_final_fc {
        return rep.transpose();
    }
    augment(spec, &rep, T::one())
}

/// `[σ_w φ / √dim ; σ_b]` laid out as `[dim + 1, B]`, times `extra_scale`.
pub(crate) fn augment<T: Scalar>(spec: &NetworkSpec, rep: &Tensor<T>, extra_scale: T) -> Result<Tensor<T>> {
    let (b, dim) = rep.dims2("augment")?;
    let s = T::from_f64_lossy((spec.sigma_w2 / dim as f64).sqrt()) * extra_scale;
    let bias = T::from_f64_lossy(spec.sigma_b2.sqrt()) * extra_scale;
    let mut out = Vec::with_capacity((dim + 1) * b);
    let t = rep.transpose()?;
    out.extend(t.data().iter().map(|&v| v * s));
    out.extend(std::iter::repeat(bias).take(b));
    Tensor::new(&[dim + 1, b], out)
}

/// `N` networks sharing one spec.
#[derive(Clone, Debug)]
pub struct NetworkEnsemble<T> {
    pub spec: NetworkSpec,
    pub members: Vec<NetworkParams<T>>,
    pub seed: u64,
}

impl<T: Scalar> NetworkEnsemble<T> {
    pub fn sample(spec: &NetworkSpec, n: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if n == 0 {
            return Err(Error::Config("ensemble needs at least one network".into()));
        }
        let members = (0..n as u64)
            .into_par_iter()
            .map(|i| sample_network(spec, derive_seed(seed, &[stream::MEMBER, i])))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            members,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Identity of this ensemble: spec plus member seeds.
    pub fn id(&self) -> u64 {
        let mut h = derive_seed(self.seed, &[self.members.len() as u64]);
        for b in self.spec.fingerprint().bytes() {
            h = derive_seed(h, &[b as u64]);
        }
        h
    }

    /// Total feature rows `N · M`.
    pub fn total_features(&self) -> usize {
        self.members.len() * self.spec.feature_dim()
    }
}
