//! Per-iteration timing of the distillation step and the kernel-entry cost
//! model used for the KIP comparison.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{distill_step, init_coreset, sample_batch, DistillConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::kernel::{conv_nngp_diagonal, conv_nngp_entry};
use crate::networks::{NetworkEnsemble, NetworkSpec};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Coreset sizes; each must be a multiple of the class count.
    pub sizes: Vec<usize>,
    pub models: Vec<usize>,
    pub channels: usize,
    pub batch_size: usize,
    pub repeats: usize,
    /// Untimed iterations before each cell.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![10, 20, 50, 100, 200, 500],
            models: vec![1, 2, 4, 8],
            channels: 32,
            batch_size: 1280,
            repeats: 200,
            warmup: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub support_size: usize,
    pub n_models: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub repeats: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Times `warmup + repeats` full distillation steps (ensemble draw, batch
/// gather, forward, backward, update) and keeps the last `repeats`.
pub fn time_cell<T: Scalar>(
    train: &Dataset<T>,
    support_size: usize,
    n_models: usize,
    cfg: &BenchConfig,
) -> Result<TimingRow> {
    let classes = train.num_classes;
    if support_size == 0 || support_size % classes != 0 {
        return Err(Error::Config(format!(
            "coreset size {support_size} is not a positive multiple of {classes} classes"
        )));
    }
    let dcfg = DistillConfig {
        img_per_class: support_size / classes,
        n_models,
        channels: cfg.channels,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..DistillConfig::default()
    };
    let mut coreset = init_coreset(train, &dcfg)?;
    let mut opt = OptimizerState::new(&coreset, &dcfg);
    let spec = coreset.spec.clone();
    let mut times = Vec::with_capacity(cfg.repeats);
    for it in 0..cfg.warmup + cfg.repeats {
        let start = Instant::now();
        let idx = sample_batch(train.len(), cfg.batch_size, cfg.seed, it);
        let batch = train.images.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let ensemble = NetworkEnsemble::sample(
            &spec,
            n_models,
            derive_seed(cfg.seed, &[stream::ENSEMBLE, it as u64]),
        )?;
        distill_step(&mut coreset, &mut opt, &batch, &labels, &ensemble, &dcfg)?;
        if it >= cfg.warmup {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    let (mean_seconds, std_seconds) = mean_std(&times);
    Ok(TimingRow {
        support_size,
        n_models,
        mean_seconds,
        std_seconds,
        repeats: cfg.repeats,
    })
}

/// Every `(size, models)` cell, models-major.
pub fn run_grid<T: Scalar>(
    train: &Dataset<T>,
    cfg: &BenchConfig,
    mut on_row: impl FnMut(&TimingRow),
) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for &n in &cfg.models {
        for &s in &cfg.sizes {
            let row = time_cell(train, s, n, cfg)?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    LinearFit {
        slope,
        intercept,
        r2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFits {
    /// Time against coreset size, one fit per model count.
    pub by_size: Vec<(usize, LinearFit)>,
    /// Time against model count, one fit per coreset size.
    pub by_models: Vec<(usize, LinearFit)>,
}

pub fn scaling_fits(rows: &[TimingRow]) -> ScalingFits {
    let mut models: Vec<usize> = rows.iter().map(|r| r.n_models).collect();
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.support_size).collect();
    models.sort_unstable();
    models.dedup();
    sizes.sort_unstable();
    sizes.dedup();
    let fit_where = |pred: &dyn Fn(&TimingRow) -> bool, x: &dyn Fn(&TimingRow) -> usize| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| pred(r))
            .map(|r| (x(r) as f64, r.mean_seconds))
            .unzip();
        linear_fit(&xs, &ys)
    };
    ScalingFits {
        by_size: models
            .iter()
            .map(|&n| (n, fit_where(&|r| r.n_models == n, &|r| r.support_size)))
            .collect(),
        by_models: sizes
            .iter()
            .map(|&s| (s, fit_where(&|r| r.support_size == s, &|r| r.n_models)))
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KipCalibration {
    /// Seconds per exact cross-kernel entry, per-image terms excluded.
    pub entry_seconds: f64,
    pub entries_timed: usize,
}

/// Times `n_entries` exact conv-NNGP entries between consecutive images of
/// `images`. Per-image diagonal terms are precomputed and not timed.
pub fn calibrate_kip<T: Scalar>(spec: &NetworkSpec, images: &Tensor<T>, n_entries: usize) -> Result<KipCalibration> {
    let d = spec.input.numel();
    let rows: Vec<Vec<f64>> = images.to_f64_vec().chunks(d).map(<[f64]>::to_vec).collect();
    if rows.len() < 2 || n_entries == 0 {
        return Err(Error::Config("kip calibration needs two images and one entry".into()));
    }
    let diags = rows
        .iter()
        .map(|x| conv_nngp_diagonal(spec, x))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let mut sink = 0.0;
    for e in 0..n_entries {
        let (i, j) = (e % rows.len(), (e + 1) % rows.len());
        sink += conv_nngp_entry(spec, &rows[i], &rows[j], &diags[i], &diags[j])?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    if !sink.is_finite() {
        return Err(Error::NonFinite("kip calibration kernel"));
    }
    Ok(KipCalibration {
        entry_seconds: elapsed / n_entries as f64,
        entries_timed: n_entries,
    })
}

/// KIP cost model `c·|B|·|S|` for one iteration.
pub fn kip_seconds(entry_seconds: f64, batch_size: usize, support_size: usize) -> f64 {
    entry_seconds * batch_size as f64 * support_size as f64
}

/// Coreset size where the KIP model meets a measured line `a + b·|S|`.
/// `None` when the lines never meet at positive size.
pub fn crossover(fit: &LinearFit, entry_seconds: f64, batch_size: usize) -> Option<f64> {
    let kip_slope = entry_seconds * batch_size as f64;
    let denom = kip_slope - fit.slope;
    (denom > 0.0).then(|| (fit.intercept / denom).max(0.0))
}
