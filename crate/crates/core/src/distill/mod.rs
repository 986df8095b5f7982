//! The coreset optimization loop.
//!
//! Each iteration samples a training batch and a fresh ensemble of random
//! networks, computes batch features without gradients and support features
//! with gradients, fits KRR on the support set and updates the coreset with
//! AdaBelief.

mod adabelief;
mod eval;

use std::time::Instant;

use rand::seq::index;
use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::data::{centered_one_hot, Dataset, Preprocessing, ZcaTransform};
use crate::error::{Error, Result};
use crate::kernel::{feature_map_tape, gram, gram_tape, random_feature_map, FeatureMatrix};
use crate::krr::{self, PlattHead};
use crate::networks::{Architecture, InputShape, NetworkEnsemble, NetworkSpec};
use crate::rng::{derive_seed, rng, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use adabelief::AdaBelief;
pub use eval::{evaluate_coreset, evaluate_many, support_kernels, EvalKernel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Platt,
    Mse,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "platt" => Ok(Self::Platt),
            "mse" => Ok(Self::Mse),
            other => Err(Error::Config(format!("unknown loss '{other}' (platt|mse)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub img_per_class: usize,
    pub n_models: usize,
    pub channels: usize,
    pub arch: Architecture,
    /// Layers of the network sampler (3 for the ConvNet).
    pub depth: usize,
    pub batch_size: usize,
    pub lambda0: f64,
    pub lr_coreset: f64,
    pub lr_transform: f64,
    pub lr_log_tau: f64,
    pub lr_labels: f64,
    pub eps: f64,
    pub loss: LossKind,
    pub learn_labels: bool,
    pub learn_transform: bool,
    pub rho: f64,
    pub patience: usize,
    pub validation_period: usize,
    pub validation_size: usize,
    pub validation_models: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            img_per_class: 10,
            n_models: 8,
            channels: 256,
            arch: Architecture::ConvNet,
            depth: 3,
            batch_size: 5120,
            lambda0: 5e-3,
            lr_coreset: 1e-3,
            lr_transform: 5e-5,
            lr_log_tau: 1e-2,
            lr_labels: 1e-3,
            eps: 1e-16,
            loss: LossKind::Platt,
            learn_labels: false,
            learn_transform: true,
            rho: 0.0,
            patience: 1000,
            validation_period: 40,
            validation_size: 1000,
            validation_models: 16,
            max_iterations: 20_000,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.img_per_class == 0 || self.n_models == 0 || self.channels == 0 {
            return bad("img_per_class, n_models and channels must be positive".into());
        }
        if self.batch_size == 0 || self.validation_models == 0 || self.validation_size == 0 {
            return bad("batch and validation sizes must be positive".into());
        }
        for (name, v) in [
            ("lr_coreset", self.lr_coreset),
            ("lr_transform", self.lr_transform),
            ("lr_log_tau", self.lr_log_tau),
            ("lr_labels", self.lr_labels),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.eps > 0.0) || !(self.lambda0 >= 0.0) {
            return bad("eps must be positive and lambda0 non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.validation_period == 0 || self.patience % self.validation_period != 0 {
            return bad(format!(
                "patience {} must be a multiple of the validation period {}",
                self.patience, self.validation_period
            ));
        }
        Ok(())
    }

    pub fn network_spec(&self, input: InputShape) -> NetworkSpec {
        match self.arch {
            Architecture::ConvNet => NetworkSpec {
                depth: self.depth,
                ..NetworkSpec::convnet3(self.channels, input)
            },
            Architecture::Fc => NetworkSpec::fc(self.depth, self.channels, input),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn transform_learnable(&self) -> bool {
        self.learn_transform && self.rho == 0.0
    }
}

/// The learnable support set.
#[derive(Clone, Debug, PartialEq)]
pub struct Coreset<T> {
    /// `X̂_S`, `[S, C, H, W]`.
    pub base_images: Tensor<T>,
    /// `T`, `[d, d]`, applied to each flattened image.
    pub transform: Tensor<T>,
    /// `y_S`, `[S, classes]`.
    pub labels: Tensor<T>,
    /// Entries of `X̂_S` pinned to their initial value.
    pub mask: Vec<bool>,
    /// Initial values of the masked entries, in mask order.
    pub frozen_values: Vec<T>,
    pub platt: PlattHead,
    pub class_of: Vec<usize>,
    /// Training indices of the initial images; empty for noise starts.
    pub source_indices: Vec<usize>,
    pub num_classes: usize,
    pub spec: NetworkSpec,
    /// Whitening applied after `T` when the buffer lives in pixel space.
    pub pixel_map: Option<ZcaTransform>,
}

impl<T: Scalar> Coreset<T> {
    pub fn len(&self) -> usize {
        self.base_images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.transform.shape()[0]
    }

    pub fn frozen_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `reshape(flatten(X̂_S) Tᵀ)`, then the pixel map when present.
    pub fn effective_images(&self) -> Result<Tensor<T>> {
        let (s, d) = (self.len(), self.dim());
        let flat = self.base_images.clone().reshape(&[s, d])?;
        let mut x = flat.matmul(&self.transform.transpose()?)?;
        if let Some(z) = &self.pixel_map {
            x = z.apply(&x)?;
        }
        x.reshape(self.base_images.shape())
    }

    /// Masked entries equal their frozen values bit for bit.
    pub fn frozen_intact(&self) -> bool {
        self.base_images
            .data()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .zip(&self.frozen_values)
            .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }

    fn reapply_mask(&mut self) {
        let mut frozen = self.frozen_values.iter();
        for (v, &m) in self.base_images.data_mut().iter_mut().zip(&self.mask) {
            if m {
                *v = *frozen.next().expect("frozen value per masked entry");
            }
        }
    }

    /// SHA-256 over every buffer, as hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.base_images, &self.transform, &self.labels] {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.update(self.mask.iter().map(|&m| m as u8).collect::<Vec<_>>());
        h.update(self.platt.log_tau.to_le_bytes());
        h.update(self.spec.fingerprint().as_bytes());
        hex::encode(h.finalize())
    }
}

/// Builds the initial coreset: a class-balanced real subset when `rho = 0`,
/// otherwise standard-normal noise with exactly `floor(rho · entries)` entries
/// frozen.
pub fn init_coreset<T: Scalar>(train: &Dataset<T>, cfg: &DistillConfig) -> Result<Coreset<T>> {
    cfg.validate()?;
    let ipc = cfg.img_per_class;
    let classes = train.num_classes;
    let shape = train.input_shape();
    let d = shape.numel();
    let s = ipc * classes;
    let class_of: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, ipc)).collect();
    let mut init_rng = rng(derive_seed(cfg.seed, &[stream::INIT]));

    let (base_images, source_indices, pixel_map) = if cfg.rho == 0.0 {
        let by_class = train.class_indices();
        let mut picked = Vec::with_capacity(s);
        for (c, idx) in by_class.iter().enumerate() {
            if idx.len() < ipc {
                return Err(Error::Data(format!(
                    "class {c} has {} examples, {ipc} required",
                    idx.len()
                )));
            }
            picked.extend(idx.choose_multiple(&mut init_rng, ipc).copied());
        }
        (train.images.select_rows(&picked), picked, None)
    } else {
        let mut noise_rng = rng(derive_seed(cfg.seed, &[stream::NOISE]));
        let data: Vec<T> = (0..s * d)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut noise_rng);
                T::from_f64_lossy(v)
            })
            .collect();
        let map = match &train.preprocessing {
            Preprocessing::Zca(z) => Some(z.clone()),
            _ => None,
        };
        let dims = [s, shape.channels, shape.height, shape.width];
        (Tensor::new(&dims, data)?, Vec::new(), map)
    };

    let entries = s * d;
    let frozen = (cfg.rho * entries as f64).floor() as usize;
    let mut mask = vec![false; entries];
    for i in index::sample(&mut rng(derive_seed(cfg.seed, &[stream::MASK])), entries, frozen) {
        mask[i] = true;
    }
    let frozen_values = base_images
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .collect();

    Ok(Coreset {
        base_images,
        transform: Tensor::eye(d),
        labels: centered_one_hot(&class_of, classes),
        mask,
        frozen_values,
        platt: PlattHead::default(),
        class_of,
        source_indices,
        num_classes: classes,
        spec: cfg.network_spec(shape),
        pixel_map,
    })
}

/// Optimizer slots for every learnable coreset parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub images: AdaBelief,
    pub transform: AdaBelief,
    pub labels: AdaBelief,
    pub log_tau: AdaBelief,
}

impl OptimizerState {
    pub fn new<T: Scalar>(coreset: &Coreset<T>, cfg: &DistillConfig) -> Self {
        Self {
            images: AdaBelief::new(coreset.base_images.len(), cfg.lr_coreset, cfg.eps),
            transform: AdaBelief::new(coreset.transform.len(), cfg.lr_transform, cfg.eps),
            labels: AdaBelief::new(coreset.labels.len(), cfg.lr_labels, cfg.eps),
            log_tau: AdaBelief::new(1, cfg.lr_log_tau, cfg.eps),
        }
    }
}

struct Graph {
    loss: Var,
    images: Var,
    transform: Var,
    labels: Var,
    log_tau: Var,
}

/// Records the coreset loss against fixed batch features on a fresh tape.
fn record_loss<T: Scalar>(
    tape: &mut Tape<T>,
    coreset: &Coreset<T>,
    batch_features: &FeatureMatrix<T>,
    batch_labels: &[usize],
    ensemble: &NetworkEnsemble<T>,
    cfg: &DistillConfig,
) -> Result<Graph> {
    let (s, d) = (coreset.len(), coreset.dim());
    let images = tape.param(coreset.base_images.clone());
    let transform = if cfg.transform_learnable() {
        tape.param(coreset.transform.clone())
    } else {
        tape.constant(coreset.transform.clone())
    };
    let labels = if cfg.learn_labels {
        tape.param(coreset.labels.clone())
    } else {
        tape.constant(coreset.labels.clone())
    };
    let log_tau = if cfg.loss == LossKind::Platt {
        tape.param(Tensor::scalar(T::from_f64_lossy(coreset.platt.log_tau)))
    } else {
        tape.constant(Tensor::scalar(T::zero()))
    };

    let flat = tape.reshape(images, &[s, d])?;
    let tt = tape.transpose(transform)?;
    let mut x = tape.matmul(flat, tt)?;
    if let Some(z) = &coreset.pixel_map {
        let neg_mean = tape.constant(Tensor::new(
            &[d],
            z.mean.iter().map(|&m| T::from_f64_lossy(-m)).collect(),
        )?);
        x = tape.add_bias(x, neg_mean)?;
        let w = tape.constant(Tensor::new(&[d, d], z.w.iter().map(|&v| T::from_f64_lossy(v)).collect())?);
        x = tape.matmul(x, w)?;
    }
    let x = tape.reshape(x, coreset.base_images.shape())?;

    let support = feature_map_tape(tape, ensemble, x)?;
    let batch = batch_features.clone().onto_tape(tape);
    let k_ss = gram_tape(tape, &support, &support)?;
    let k_bs = gram_tape(tape, &batch, &support)?;
    let (preds, _) = krr::krr_predict_tape(tape, k_bs, k_ss, labels, cfg.lambda0)?;
    let loss = match cfg.loss {
        LossKind::Platt => {
            let mut t = Tensor::zeros(&[batch_labels.len(), coreset.num_classes]);
            for (i, &l) in batch_labels.iter().enumerate() {
                t.set2(i, l, T::one());
            }
            let targets = tape.constant(t);
            krr::platt_loss_tape(tape, preds, targets, log_tau)?
        }
        LossKind::Mse => {
            let targets = tape.constant(centered_one_hot(batch_labels, coreset.num_classes));
            tape.mse(preds, targets)?
        }
    };
    Ok(Graph {
        loss,
        images,
        transform,
        labels,
        log_tau,
    })
}

/// Coreset loss on a batch without building gradients.
pub fn coreset_loss<T: Scalar>(
    coreset: &Coreset<T>,
    batch_features: &FeatureMatrix<T>,
    batch_labels: &[usize],
    ensemble: &NetworkEnsemble<T>,
    cfg: &DistillConfig,
) -> Result<f64> {
    let x = coreset.effective_images()?;
    let support = random_feature_map(ensemble, &x)?;
    let k_ss = gram(&support, &support)?;
    let k_bs = gram(batch_features, &support)?;
    let sol = krr::krr_fit(&k_ss, &coreset.labels, cfg.lambda0)?;
    let preds = krr::krr_predict(&k_bs, &sol)?;
    match cfg.loss {
        LossKind::Platt => {
            let y = centered_one_hot::<f64>(batch_labels, coreset.num_classes);
            krr::platt_loss(&preds, &y, &coreset.platt)
        }
        LossKind::Mse => krr::mse_loss(&preds, &centered_one_hot(batch_labels, coreset.num_classes)),
    }
}

/// One optimization step on a sampled batch and ensemble. Returns the loss
/// before the update.
pub fn distill_step<T: Scalar>(
    coreset: &mut Coreset<T>,
    opt: &mut OptimizerState,
    batch_x: &Tensor<T>,
    batch_labels: &[usize],
    ensemble: &NetworkEnsemble<T>,
    cfg: &DistillConfig,
) -> Result<f64> {
    let features = random_feature_map(ensemble, batch_x)?;
    let mut tape = Tape::new();
    let g = record_loss(&mut tape, coreset, &features, batch_labels, ensemble, cfg)?;
    let loss = tape.value(g.loss).item().to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFinite("distillation loss"));
    }
    let mut grads = tape.backward(g.loss)?;

    if let Some(mut gi) = grads.take(g.images) {
        for (v, &m) in gi.data_mut().iter_mut().zip(&coreset.mask) {
            if m {
                *v = T::zero();
            }
        }
        opt.images.update(coreset.base_images.data_mut(), gi.data());
    }
    if let Some(gt) = grads.take(g.transform) {
        opt.transform.update(coreset.transform.data_mut(), gt.data());
    }
    if let Some(gl) = grads.take(g.labels) {
        opt.labels.update(coreset.labels.data_mut(), gl.data());
    }
    if let Some(gtau) = grads.take(g.log_tau) {
        let mut lt = [coreset.platt.log_tau];
        opt.log_tau.update(&mut lt, &[gtau.item().to_f64_lossy()]);
        coreset.platt.log_tau = lt[0];
    }
    coreset.reapply_mask();
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub validation: Vec<ValidationRecord>,
    pub iterations: Vec<IterationRecord>,
    pub best_iteration: usize,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
}

/// Samples `n` distinct training indices for iteration `it`.
pub fn sample_batch(train_len: usize, n: usize, seed: u64, it: usize) -> Vec<usize> {
    let mut r = rng(derive_seed(seed, &[stream::BATCH, it as u64]));
    index::sample(&mut r, train_len, n.min(train_len)).into_vec()
}

/// Fixed validation features and labels.
struct Validation<T> {
    ensemble: NetworkEnsemble<T>,
    features: FeatureMatrix<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Validation<T> {
    fn new(train: &Dataset<T>, spec: &NetworkSpec, cfg: &DistillConfig) -> Result<Self> {
        if train.len() < cfg.validation_size {
            return Err(Error::Config(format!(
                "training set has {} examples, fewer than the validation size {}",
                train.len(),
                cfg.validation_size
            )));
        }
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng(derive_seed(cfg.seed, &[stream::VALIDATION, 1])));
        idx.truncate(cfg.validation_size);
        let subset = train.subset(&idx);
        let ensemble = NetworkEnsemble::sample(
            spec,
            cfg.validation_models,
            derive_seed(cfg.seed, &[stream::VALIDATION]),
        )?;
        let features = random_feature_map(&ensemble, &subset.images)?;
        Ok(Self {
            ensemble,
            features,
            labels: subset.labels,
        })
    }

    fn loss(&self, coreset: &Coreset<T>, cfg: &DistillConfig) -> Result<f64> {
        coreset_loss(coreset, &self.features, &self.labels, &self.ensemble, cfg)
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome<T> {
    /// Best-validation snapshot.
    pub coreset: Coreset<T>,
    /// Coreset after the last step.
    pub last: Coreset<T>,
    pub initial: Coreset<T>,
    pub history: History,
}

/// Runs the loop until patience or `max_iterations` is exhausted and returns
/// the snapshot with the lowest validation loss.
pub fn distill_run<T: Scalar>(train: &Dataset<T>, cfg: &DistillConfig) -> Result<DistillOutcome<T>> {
    distill_run_with(train, cfg, |_, _| {})
}

/// [`distill_run`] with a callback after each step (`iteration`, `loss`).
pub fn distill_run_with<T: Scalar>(
    train: &Dataset<T>,
    cfg: &DistillConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<DistillOutcome<T>> {
    cfg.validate()?;
    let initial = init_coreset(train, cfg)?;
    let spec = initial.spec.clone();
    let validation = Validation::new(train, &spec, cfg)?;
    let mut coreset = initial.clone();
    let mut opt = OptimizerState::new(&coreset, cfg);

    let mut history = History {
        best_validation_loss: validation.loss(&coreset, cfg)?,
        ..History::default()
    };
    history.validation.push(ValidationRecord {
        iteration: 0,
        loss: history.best_validation_loss,
    });
    let mut best = coreset.clone();

    for it in 0..cfg.max_iterations {
        let start = Instant::now();
        let idx = sample_batch(train.len(), cfg.batch_size, cfg.seed, it);
        let batch = train.images.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let ensemble = NetworkEnsemble::sample(
            &spec,
            cfg.n_models,
            derive_seed(cfg.seed, &[stream::ENSEMBLE, it as u64]),
        )?;
        let loss = distill_step(&mut coreset, &mut opt, &batch, &labels, &ensemble, cfg).map_err(
            |e| Error::Iteration {
                iteration: it,
                source: Box::new(e),
            },
        )?;
        history.iterations.push(IterationRecord {
            iteration: it,
            loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        on_step(it, loss);

        let done = it + 1;
        if done % cfg.validation_period == 0 {
            let v = validation.loss(&coreset, cfg).map_err(|e| Error::Iteration {
                iteration: it,
                source: Box::new(e),
            })?;
            history.validation.push(ValidationRecord { iteration: done, loss: v });
            if v < history.best_validation_loss {
                history.best_validation_loss = v;
                history.best_iteration = done;
                best = coreset.clone();
            } else if done - history.best_iteration >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok(DistillOutcome {
        coreset: best,
        last: coreset,
        initial,
        history,
    })
}
