//! Finite-width networks trained by gradient descent on a distilled coreset.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::distill::Coreset;
use crate::error::{Error, Result};
use crate::krr;
use crate::networks::{forward, forward_tape, sample_network, NetworkParams, NetworkSpec};
use crate::rng::{derive_seed, rng, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub channels: usize,
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub label_scales: Vec<f64>,
    pub momentum: f64,
    pub centering: bool,
    pub steps: usize,
    /// Steps without a validation improvement before stopping.
    pub patience: usize,
    pub eval_period: usize,
    pub batch_size: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            channels: 1024,
            learning_rates: vec![1e-1, 1e-2, 1e-3, 1e-4],
            weight_decays: vec![0.0, 1e-3],
            label_scales: vec![1.0, 2.0, 8.0, 16.0],
            momentum: 0.9,
            centering: true,
            steps: 3000,
            patience: 300,
            eval_period: 25,
            batch_size: 500,
        }
    }
}

/// One point of the hyperparameter grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub label_scale: f64,
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.learning_rates.is_empty() || self.weight_decays.is_empty() || self.label_scales.is_empty() {
            return bad("transfer grids must be nonempty".into());
        }
        if let Some(a) = self.label_scales.iter().find(|&&a| !(a >= 1.0)) {
            return bad(format!("label scale must be >= 1, got {a}"));
        }
        if let Some(w) = self.weight_decays.iter().find(|&&w| !(w >= 0.0)) {
            return bad(format!("weight decay must be >= 0, got {w}"));
        }
        if let Some(l) = self.learning_rates.iter().find(|&&l| !(l > 0.0)) {
            return bad(format!("learning rate must be > 0, got {l}"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.channels == 0 || self.batch_size == 0 || self.eval_period == 0 {
            return bad("channels, batch_size and eval_period must be positive".into());
        }
        Ok(())
    }

    /// Grid in lr-major, then weight decay, then label scale order.
    pub fn grid(&self) -> Vec<HyperPoint> {
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &weight_decay in &self.weight_decays {
                for &label_scale in &self.label_scales {
                    out.push(HyperPoint {
                        lr,
                        weight_decay,
                        label_scale,
                    });
                }
            }
        }
        out
    }

    /// The finite network for a coreset: its kernel architecture at
    /// `channels` width plus a linear head.
    pub fn network_spec(&self, kernel_spec: &NetworkSpec, num_classes: usize) -> NetworkSpec {
        NetworkSpec {
            channels: self.channels,
            use_final_fc: false,
            ..kernel_spec.clone()
        }
        .with_head(num_classes)
    }
}

/// A finite network together with its initialization.
#[derive(Clone, Debug)]
pub struct FiniteModel<T> {
    pub spec: NetworkSpec,
    pub params: NetworkParams<T>,
    pub init: NetworkParams<T>,
    pub centered: bool,
    pub label_scale: f64,
}

impl<T: Scalar> FiniteModel<T> {
    pub fn new(spec: NetworkSpec, seed: u64, centered: bool, label_scale: f64) -> Result<Self> {
        spec.validate()?;
        if !spec.use_final_fc {
            return Err(Error::Config("finite model needs a linear head".into()));
        }
        let init = sample_network(&spec, seed);
        Ok(Self {
            spec,
            params: init.clone(),
            init,
            centered,
            label_scale,
        })
    }

    /// Raw training-scale outputs, `f_θ(x) - f_θ0(x)` when centered.
    pub fn raw_outputs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = forward(&self.spec, &self.params, x)?;
        if self.centered {
            y = y.zip_map(&forward(&self.spec, &self.init, x)?, |a, b| a - b)?;
        }
        Ok(y)
    }

    /// Inference outputs, the raw outputs divided by `α`.
    pub fn outputs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .raw_outputs(x)?
            .map(|v| v / T::from_f64_lossy(self.label_scale)))
    }

    /// `2·wd·(θ - θ0)` for every parameter tensor, weights then bias per layer.
    pub fn weight_decay_grad(&self, weight_decay: f64) -> Vec<Tensor<T>> {
        let c = T::from_f64_lossy(2.0 * weight_decay);
        self.params
            .layers
            .iter()
            .zip(&self.init.layers)
            .flat_map(|(p, q)| [(&p.weight, &q.weight), (&p.bias, &q.bias)])
            .map(|(p, q)| p.zip_map(q, |a, b| (a - b) * c).expect("same shape"))
            .collect()
    }

    fn decay_penalty(&self, weight_decay: f64) -> f64 {
        let sq: f64 = self
            .params
            .layers
            .iter()
            .zip(&self.init.layers)
            .flat_map(|(p, q)| [(&p.weight, &q.weight), (&p.bias, &q.bias)])
            .flat_map(|(p, q)| p.data().iter().zip(q.data()))
            .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
            .sum();
        weight_decay * sq
    }

    /// `L_α = mean ‖f(x) - α y‖² / α²` and its parameter gradients.
    pub fn loss_and_grads(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let alpha = T::from_f64_lossy(self.label_scale);
        let mut tape = Tape::new();
        let vars: Vec<(Var, Var)> = self
            .params
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        let xv = tape.constant(x.clone());
        let mut out = forward_tape(&self.spec, &mut tape, &vars, xv)?;
        if self.centered {
            let f0 = tape.constant(forward(&self.spec, &self.init, x)?);
            out = tape.sub(out, f0)?;
        }
        let target = tape.constant(y.map(|v| v * alpha));
        let mse = tape.mse(out, target)?;
        let loss = tape.scale(mse, T::one() / (alpha * alpha));
        let value = tape.value(loss).data()[0].to_f64_lossy();
        let mut grads = tape.backward(loss)?;
        let flat = vars
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .map(|v| grads.take(v).expect("parameter gradient"))
            .collect();
        Ok((value, flat))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(crate::tensor::argmax_rows(&self.outputs(x)?))
    }
}

/// Top-1 accuracy of `f(x)/α` on `test`.
pub fn eval_finite<T: Scalar>(model: &FiniteModel<T>, test: &Dataset<T>) -> Result<f64> {
    let mut hits = 0usize;
    for start in (0..test.len()).step_by(500) {
        let idx: Vec<usize> = (start..(start + 500).min(test.len())).collect();
        let part = test.subset(&idx);
        let pred = model.predict(&part.images)?;
        hits += pred.iter().zip(&part.labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / test.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters at the best validation accuracy.
    pub model: FiniteModel<T>,
    pub validation_accuracy: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub final_loss: f64,
}

/// SGD with momentum on `L_α` plus `wd·‖θ - θ0‖²`.
///
/// Full batch when the coreset fits in one batch. Returns the snapshot with
/// the best validation accuracy; stops after `patience` steps without
/// improvement.
pub fn train_finite<T: Scalar>(
    coreset: &Coreset<T>,
    cfg: &TransferConfig,
    point: HyperPoint,
    validation: &Dataset<T>,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let spec = cfg.network_spec(&coreset.spec, coreset.num_classes);
    let model_seed = derive_seed(seed, &[stream::TRANSFER, 0]);
    let mut model = FiniteModel::new(spec, model_seed, cfg.centering, point.label_scale)?;
    let x_all = coreset.effective_images()?;
    let y_all = coreset.labels.clone();
    let s = coreset.len();
    let full_batch = s <= cfg.batch_size;
    let mut order: Vec<usize> = (0..s).collect();
    let mut r = rng(derive_seed(seed, &[stream::TRANSFER, 1]));
    let mut velocity: Vec<Tensor<T>> = model
        .params
        .layers
        .iter()
        .flat_map(|l| [Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())])
        .collect();
    let diverged = || Error::Divergence {
        lr: point.lr,
        weight_decay: point.weight_decay,
        label_scale: point.label_scale,
    };
    let lr = T::from_f64_lossy(point.lr);
    let mu = T::from_f64_lossy(cfg.momentum);

    let mut best = (eval_finite(&model, validation)?, 0usize, model.params.clone());
    let mut since_best = 0usize;
    let mut final_loss = f64::NAN;
    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        let (x, y) = if full_batch {
            (x_all.clone(), y_all.clone())
        } else {
            order.shuffle(&mut r);
            let idx = &order[..cfg.batch_size];
            (x_all.select_rows(idx), y_all.select_rows(idx))
        };
        let (loss, grads) = model.loss_and_grads(&x, &y)?;
        let total = loss + model.decay_penalty(point.weight_decay);
        if !total.is_finite() {
            return Err(diverged());
        }
        final_loss = total;
        let decay = model.weight_decay_grad(point.weight_decay);
        let params = model
            .params
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias]);
        for (((p, g), d), v) in params.zip(&grads).zip(&decay).zip(velocity.iter_mut()) {
            for (((pv, &gv), &dv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(d.data())
                .zip(v.data_mut().iter_mut())
            {
                *vv = mu * *vv + gv + dv;
                *pv -= lr * *vv;
            }
        }
        steps_run = step;
        if step % cfg.eval_period == 0 || step == cfg.steps {
            let acc = eval_finite(&model, validation)?;
            if acc > best.0 {
                best = (acc, step, model.params.clone());
                since_best = 0;
            } else {
                since_best += cfg.eval_period;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (validation_accuracy, best_step, params) = best;
    model.params = params;
    Ok(TrainOutcome {
        model,
        validation_accuracy,
        best_step,
        steps_run,
        final_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: HyperPoint,
    /// `None` when training diverged.
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: HyperPoint,
    pub best_index: usize,
    pub rows: Vec<GridRow>,
}

/// Exhaustive search by validation accuracy. Divergent points rank last and
/// ties go to the earlier grid point.
pub fn grid_search<T: Scalar>(
    coreset: &Coreset<T>,
    cfg: &TransferConfig,
    validation: &Dataset<T>,
    seed: u64,
) -> Result<GridResult> {
    grid_search_with(coreset, cfg, validation, seed, |_, _| Ok(()))
}

/// [`grid_search`] with a callback per trained point; `None` marks divergence.
pub fn grid_search_with<T: Scalar>(
    coreset: &Coreset<T>,
    cfg: &TransferConfig,
    validation: &Dataset<T>,
    seed: u64,
    mut on_point: impl FnMut(HyperPoint, Option<&TrainOutcome<T>>) -> Result<()>,
) -> Result<GridResult> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for point in cfg.grid() {
        let acc = match train_finite(coreset, cfg, point, validation, seed) {
            Ok(o) => {
                on_point(point, Some(&o))?;
                Some(o.validation_accuracy)
            }
            Err(Error::Divergence { .. }) => {
                on_point(point, None)?;
                None
            }
            Err(e) => return Err(e),
        };
        rows.push(GridRow {
            point,
            validation_accuracy: acc,
        });
    }
    let best_index = select_best(&rows);
    Ok(GridResult {
        best: rows[best_index].point,
        best_index,
        rows,
    })
}

fn select_best(rows: &[GridRow]) -> usize {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let better = match (r.validation_accuracy, rows[best].validation_accuracy) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            best = i;
        }
    }
    best
}

/// KRR predictions with labels scaled by `α` and outputs divided by `α`.
pub fn krr_label_scaled(
    k_qs: &Tensor<f64>,
    k_ss: &Tensor<f64>,
    y_s: &Tensor<f64>,
    lambda0: f64,
    alpha: f64,
) -> Result<Tensor<f64>> {
    let sol = krr::krr_fit(k_ss, &y_s.map(|v| v * alpha), lambda0)?;
    Ok(krr::krr_predict(k_qs, &sol)?.map(|v| v / alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{init_coreset, DistillConfig};
    use crate::networks::InputShape;

    fn tiny_data(n: usize) -> Dataset<f64> {
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let images = Tensor::from_fn(&[n, 1, 4, 4], |k| {
            let i = k / 16;
            let p = k % 16;
            let c = labels[i] as f64;
            ((p as f64 - 4.0 * c).abs() < 2.0) as u8 as f64 + 0.1 * ((k * 7919 % 13) as f64 / 13.0 - 0.5)
        });
        Dataset::new(images, labels, 3).unwrap()
    }

    fn tiny_coreset() -> Coreset<f64> {
        let cfg = DistillConfig {
            img_per_class: 2,
            channels: 4,
            depth: 2,
            ..DistillConfig::default()
        };
        init_coreset(&tiny_data(30), &cfg).unwrap()
    }

    fn small_cfg() -> TransferConfig {
        TransferConfig {
            channels: 8,
            steps: 40,
            patience: 20,
            eval_period: 5,
            ..TransferConfig::default()
        }
    }

    #[test]
    fn full_grid_has_32_points_in_order() {
        let g = TransferConfig::default().grid();
        assert_eq!(g.len(), 32);
        assert_eq!(g[0], HyperPoint { lr: 1e-1, weight_decay: 0.0, label_scale: 1.0 });
        assert_eq!(g[1].label_scale, 2.0);
        assert_eq!(g[4].weight_decay, 1e-3);
        assert_eq!(g[8].lr, 1e-2);
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let mut c = TransferConfig::default();
        c.label_scales = vec![0.5];
        assert!(c.validate().is_err());
        c.label_scales.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn centered_output_is_zero_at_init() {
        let spec = NetworkSpec::convnet3(6, InputShape::new(1, 8, 8)).with_head(4);
        let m = FiniteModel::<f64>::new(spec, 3, true, 8.0).unwrap();
        let x = Tensor::from_fn(&[5, 1, 8, 8], |i| (i as f64 * 0.37).sin());
        assert!(m.outputs(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(m.predict(&x).unwrap(), vec![0; 5]);
    }

    #[test]
    fn initial_centered_loss_is_label_energy() {
        let spec = NetworkSpec::fc(2, 16, InputShape::new(1, 4, 4)).with_head(3);
        let x = Tensor::from_fn(&[6, 1, 4, 4], |i| (i as f64 * 0.11).cos());
        let y = Tensor::from_fn(&[6, 3], |i| (i % 4) as f64 * 0.3 - 0.4);
        let energy = y.data().iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        for alpha in [1.0, 2.0, 16.0] {
            let m = FiniteModel::<f64>::new(spec.clone(), 1, true, alpha).unwrap();
            let (loss, _) = m.loss_and_grads(&x, &y).unwrap();
            assert!((loss - energy).abs() < 1e-14);
        }
    }

    #[test]
    fn alpha_one_uncentered_is_plain_mse() {
        let spec = NetworkSpec::fc(2, 16, InputShape::new(1, 4, 4)).with_head(3);
        let m = FiniteModel::<f64>::new(spec, 2, false, 1.0).unwrap();
        let x = Tensor::from_fn(&[4, 1, 4, 4], |i| (i as f64 * 0.23).sin());
        let y = Tensor::from_fn(&[4, 3], |i| (i % 3) as f64 - 1.0);
        let (loss, _) = m.loss_and_grads(&x, &y).unwrap();
        let mse = krr::mse_loss(&m.outputs(&x).unwrap(), &y).unwrap();
        assert!((loss - mse).abs() < 1e-14);
    }

    #[test]
    fn weight_decay_gradient_vanishes_at_init() {
        let spec = NetworkSpec::convnet3(4, InputShape::new(1, 8, 8)).with_head(2);
        let mut m = FiniteModel::<f64>::new(spec, 5, true, 1.0).unwrap();
        assert!(m
            .weight_decay_grad(1e-3)
            .iter()
            .all(|g| g.data().iter().all(|&v| v == 0.0)));
        m.params.layers[0].weight.data_mut()[0] += 0.5;
        let g = m.weight_decay_grad(1e-3);
        assert!((g[0].data()[0] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn alpha_does_not_change_argmax() {
        let spec = NetworkSpec::fc(2, 8, InputShape::new(1, 4, 4)).with_head(3);
        let data = tiny_data(12);
        let a = FiniteModel::<f64>::new(spec.clone(), 4, false, 1.0).unwrap();
        let mut b = a.clone();
        b.label_scale = 16.0;
        assert_eq!(eval_finite(&a, &data).unwrap(), eval_finite(&b, &data).unwrap());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let core = tiny_coreset();
        let val = tiny_data(30);
        let cfg = small_cfg();
        let p = HyperPoint { lr: 1e-2, weight_decay: 1e-3, label_scale: 2.0 };
        let a = train_finite(&core, &cfg, p, &val, 7).unwrap();
        let b = train_finite(&core, &cfg, p, &val, 7).unwrap();
        assert_eq!(a.model.params, b.model.params);
        let m0 = FiniteModel::<f64>::new(a.model.spec.clone(), 0, true, 2.0).unwrap();
        let (l0, _) = m0.loss_and_grads(&core.effective_images().unwrap(), &core.labels).unwrap();
        assert!(a.final_loss < l0, "{} vs {l0}", a.final_loss);
    }

    #[test]
    fn divergent_point_ranks_last() {
        let core = tiny_coreset();
        let val = tiny_data(30);
        let cfg = TransferConfig {
            learning_rates: vec![1e12, 1e-2],
            weight_decays: vec![0.0],
            label_scales: vec![1.0],
            ..small_cfg()
        };
        let r = grid_search(&core, &cfg, &val, 1).unwrap();
        assert_eq!(r.rows[0].validation_accuracy, None);
        assert_eq!(r.best_index, 1);
        let best = r.rows[1].validation_accuracy.unwrap();
        assert!(r.rows.iter().all(|row| row.validation_accuracy.unwrap_or(-1.0) <= best));
    }

    #[test]
    fn ties_go_to_earlier_point() {
        let p = HyperPoint { lr: 1.0, weight_decay: 0.0, label_scale: 1.0 };
        let rows = vec![
            GridRow { point: p, validation_accuracy: None },
            GridRow { point: p, validation_accuracy: Some(0.5) },
            GridRow { point: p, validation_accuracy: Some(0.5) },
        ];
        assert_eq!(select_best(&rows), 1);
        assert_eq!(select_best(&rows[..1]), 0);
    }

    #[test]
    fn krr_label_scaling_is_exact() {
        let k = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 2.0 } else { 0.5 });
        let kq = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25);
        let y = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5);
        let base = krr_label_scaled(&kq, &k, &y, 5e-3, 1.0).unwrap();
        for alpha in [2.0, 8.0, 16.0] {
            let scaled = krr_label_scaled(&kq, &k, &y, 5e-3, alpha).unwrap();
            assert!(scaled.max_abs_diff(&base) < 1e-14);
        }
    }
}
