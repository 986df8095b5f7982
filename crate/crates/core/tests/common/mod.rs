#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use rfad::autodiff::{Tape, Var};
use rfad::data::{data_root, load_preprocessed, Dataset, DatasetName};
use rfad::distill::{DistillConfig, EvalKernel};
use rfad::rng::rng;
use rfad::{Real, Result, Tensor};

/// Evaluation kernel shared by every desk-scale accuracy comparison.
pub const EVAL_KERNEL: EvalKernel = EvalKernel::Empirical {
    n_models: 16,
    channels: 256,
    seed: 7,
};

/// Test points scored in desk-scale accuracy comparisons.
pub const DESK_TEST: usize = 2000;

pub fn desk_distill(seed: u64) -> DistillConfig {
    DistillConfig {
        img_per_class: 10,
        n_models: 2,
        channels: 32,
        batch_size: 1280,
        max_iterations: 320,
        validation_size: 1000,
        seed,
        ..DistillConfig::default()
    }
}

pub fn load(name: DatasetName) -> Result<(Dataset<Real>, Dataset<Real>)> {
    load_preprocessed(&data_root(), name)
}

pub fn head(ds: &Dataset<Real>, n: usize) -> Dataset<Real> {
    ds.subset(&(0..n.min(ds.len())).collect::<Vec<_>>())
}

pub fn to_f64(ds: &Dataset<Real>) -> Dataset<f64> {
    Dataset::new(ds.images.cast(), ds.labels.clone(), ds.num_classes).expect("same layout")
}

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.sample::<f64, _>(StandardNormal))
}

/// Gaussian entries pushed at least `gap` away from zero, so ReLU kinks stay
/// out of reach of the finite-difference step.
pub fn gaussian_away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    gaussian(shape, seed).map(|v| v + gap.copysign(v))
}

/// Central-difference gradient of `f` at `inputs`, on `coords[k]` of input `k`.
pub fn numeric_grad(
    inputs: &[Tensor<f64>],
    coords: &[Vec<usize>],
    f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (k, idx) in coords.iter().enumerate() {
        let mut g = Vec::with_capacity(idx.len());
        for &i in idx {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = f(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = f(&work)?;
            work[k].data_mut()[i] = x0;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Up to `max` coordinate indices of a tensor of length `len`, spread evenly.
pub fn coords_for(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|k| k * len / max).collect()
}

/// Scalar loss `Σ out ⊙ R` with a fixed random `R`, or `out` itself when it
/// already has one element.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let value = tape.value(out);
    if value.len() == 1 {
        return Ok(out);
    }
    let r = gaussian(value.shape(), 0xfeed);
    let rv = tape.constant(r);
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

/// Worst per-input relative error between reverse-mode gradients of `build`
/// and central differences, over at most `max_coords` entries per input.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    max_coords: usize,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = project(&mut tape, out)?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| g.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let coords: Vec<Vec<usize>> = inputs.iter().map(|x| coords_for(x.len(), max_coords)).collect();
    let numeric = numeric_grad(inputs, &coords, &|xs| Ok(eval(xs, false)?.0), 1e-6)?;
    let mut worst = 0.0f64;
    for ((a, n), idx) in analytic.iter().zip(&numeric).zip(&coords) {
        let picked: Vec<f64> = idx.iter().map(|&i| a.data()[i]).collect();
        worst = worst.max(relative_error(&picked, n));
    }
    Ok(worst)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn spd_from(tape: &mut Tape<f64>, m: Var, n: usize) -> Result<Var> {
    let mt = tape.transpose(m)?;
    let mm = tape.matmul(m, mt)?;
    let shift = tape.constant(Tensor::<f64>::eye(n).scale(0.5 * n as f64));
    tape.add(mm, shift)
}

/// Gradient check of every tape operation in isolation.
pub fn op_gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    let g = gaussian;
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "conv2d",
            vec![g(&[2, 3, 6, 6], 1), g(&[4, 3, 3, 3], 2), g(&[4], 3)],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2])),
        ),
        ("avgpool2", vec![g(&[2, 3, 6, 6], 4)], Box::new(|t, v| t.avgpool2(v[0]))),
        (
            "relu",
            vec![gaussian_away_from_zero(&[3, 5], 5, 0.1)],
            Box::new(|t, v| Ok(t.relu(v[0]))),
        ),
        ("matmul", vec![g(&[3, 4], 6), g(&[4, 5], 7)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![g(&[3, 4], 8)], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![g(&[3, 4], 9)], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("add", vec![g(&[3, 4], 10), g(&[3, 4], 11)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![g(&[3, 4], 12), g(&[3, 4], 13)], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![g(&[3, 4], 14), g(&[3, 4], 15)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_bias", vec![g(&[3, 4], 16), g(&[4], 17)], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("scale", vec![g(&[3, 4], 18)], Box::new(|t, v| Ok(t.scale(v[0], -0.7)))),
        (
            "mul_scalar",
            vec![g(&[3, 4], 19), Tensor::scalar(0.8)],
            Box::new(|t, v| t.mul_scalar(v[0], v[1])),
        ),
        ("exp", vec![g(&[3, 4], 20)], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("sum", vec![g(&[3, 4], 21)], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![g(&[3, 4], 22)], Box::new(|t, v| Ok(t.mean(v[0])))),
        (
            "concat_rows",
            vec![g(&[2, 4], 23), g(&[3, 4], 24)],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
        ),
        (
            "add_ridge",
            vec![g(&[4, 4], 25)],
            Box::new(|t, v| {
                let a = spd_from(t, v[0], 4)?;
                Ok(t.add_ridge(a, 0.3)?.0)
            }),
        ),
        (
            "solve_spd",
            vec![g(&[4, 4], 26), g(&[4, 3], 27)],
            Box::new(|t, v| {
                let a = spd_from(t, v[0], 4)?;
                t.solve_spd(a, v[1])
            }),
        ),
        (
            "softmax_cross_entropy",
            vec![g(&[4, 5], 28)],
            Box::new(|t, v| {
                let mut y = Tensor::<f64>::zeros(&[4, 5]);
                for r in 0..4 {
                    y.set2(r, (r * 3) % 5, 1.0);
                }
                let y = t.constant(y);
                t.softmax_cross_entropy(v[0], y)
            }),
        ),
        ("mse", vec![g(&[4, 3], 29), g(&[4, 3], 30)], Box::new(|t, v| t.mse(v[0], v[1]))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| Ok((name, grad_check(&inputs, 512, &*build)?)))
        .collect()
}

/// The distillation objective: learned transform and labels, random-feature
/// NNGP, adaptive ridge, SPD solve and Platt loss with a learned temperature.
pub fn platt_graph_error() -> Result<f64> {
    use rfad::kernel::{feature_map_tape, gram_tape, random_feature_map};
    use rfad::krr::{krr_predict_tape, platt_loss_tape};
    use rfad::networks::{InputShape, NetworkEnsemble, NetworkSpec};

    let spec = NetworkSpec::convnet3(4, InputShape::new(1, 8, 8));
    let ens = NetworkEnsemble::<f64>::sample(&spec, 2, 41)?;
    let (s, b, d, c) = (4usize, 6usize, 64usize, 2usize);
    let batch = random_feature_map(&ens, &gaussian(&[b, 1, 8, 8], 42))?;
    let mut targets = Tensor::<f64>::zeros(&[b, c]);
    for r in 0..b {
        targets.set2(r, r % c, 1.0);
    }
    let transform = Tensor::<f64>::eye(d).zip_map(&gaussian(&[d, d], 43), |a, n| a + 0.05 * n)?;
    let labels = gaussian(&[s, c], 44).scale(0.5);
    let inputs = vec![gaussian(&[s, 1, 8, 8], 45), transform, labels, Tensor::scalar(0.3)];
    grad_check(&inputs, 300, &|t, v| {
        let flat = t.reshape(v[0], &[s, d])?;
        let tt = t.transpose(v[1])?;
        let x = t.matmul(flat, tt)?;
        let x = t.reshape(x, &[s, 1, 8, 8])?;
        let support = feature_map_tape(t, &ens, x)?;
        let fixed = batch.clone().onto_tape(t);
        let k_ss = gram_tape(t, &support, &support)?;
        let k_bs = gram_tape(t, &fixed, &support)?;
        let (preds, _) = krr_predict_tape(t, k_bs, k_ss, v[2], 5e-3)?;
        let y = t.constant(targets.clone());
        platt_loss_tape(t, preds, y, v[3])
    })
}

/// KRR with MSE against centered one-hot targets, learned labels and an FC
/// feature sampler.
pub fn mse_graph_error() -> Result<f64> {
    use rfad::data::centered_one_hot;
    use rfad::kernel::{feature_map_tape, gram_tape, random_feature_map};
    use rfad::krr::krr_predict_tape;
    use rfad::networks::{InputShape, NetworkEnsemble, NetworkSpec};

    let spec = NetworkSpec::fc(3, 16, InputShape::new(1, 4, 4));
    let ens = NetworkEnsemble::<f64>::sample(&spec, 3, 51)?;
    let (s, b, c) = (5usize, 7usize, 3usize);
    let batch = random_feature_map(&ens, &gaussian(&[b, 1, 4, 4], 52))?;
    let targets: Tensor<f64> = centered_one_hot(&(0..b).map(|i| i % c).collect::<Vec<_>>(), c);
    let inputs = vec![gaussian(&[s, 1, 4, 4], 53), gaussian(&[s, c], 54)];
    grad_check(&inputs, 300, &|t, v| {
        let support = feature_map_tape(t, &ens, v[0])?;
        let fixed = batch.clone().onto_tape(t);
        let k_ss = gram_tape(t, &support, &support)?;
        let k_bs = gram_tape(t, &fixed, &support)?;
        let (preds, _) = krr_predict_tape(t, k_bs, k_ss, v[1], 1e-2)?;
        let y = t.constant(targets.clone());
        t.mse(preds, y)
    })
}

/// The finite-network transfer loss with centering and label scaling.
pub fn transfer_loss_error() -> Result<f64> {
    use rfad::networks::{InputShape, NetworkSpec};
    use rfad::transfer::FiniteModel;

    let spec = NetworkSpec::convnet3(4, InputShape::new(1, 8, 8)).with_head(3);
    let mut model = FiniteModel::<f64>::new(spec, 61, true, 2.0)?;
    for l in &mut model.params.layers {
        l.weight = l.weight.zip_map(&gaussian(l.weight.shape(), 62), |a, n| a + 0.1 * n)?;
    }
    let x = gaussian(&[5, 1, 8, 8], 63);
    let y = gaussian(&[5, 3], 64);
    let (_, analytic) = model.loss_and_grads(&x, &y)?;
    let flat: Vec<Tensor<f64>> = model
        .params
        .layers
        .iter()
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .collect();
    let coords: Vec<Vec<usize>> = flat.iter().map(|t| coords_for(t.len(), 200)).collect();
    let numeric = numeric_grad(
        &flat,
        &coords,
        &|ps| {
            let mut m = model.clone();
            for (l, pair) in m.params.layers.iter_mut().zip(ps.chunks(2)) {
                l.weight = pair[0].clone();
                l.bias = pair[1].clone();
            }
            Ok(m.loss_and_grads(&x, &y)?.0)
        },
        1e-6,
    )?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .zip(&coords)
        .map(|((a, n), idx)| {
            let picked: Vec<f64> = idx.iter().map(|&i| a.data()[i]).collect();
            relative_error(&picked, n)
        })
        .fold(0.0, f64::max))
}
