use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rfad::bench::{calibrate_kip, crossover, kip_seconds, run_grid, scaling_fits, BenchConfig};
use rfad::checkpoint;
use rfad::data::{data_root, load_preprocessed, Dataset, DatasetName};
use rfad::distill::{
    distill_run_with, evaluate_coreset, Coreset, DistillConfig, EvalKernel, IterationRecord,
};
use rfad::interpret::{kernel_hash, similar_training_points, InfluenceCache, KernelModel};
use rfad::krr::{krr_predict, predict_proba};
use rfad::tensor::argmax_rows;
use rfad::transfer::{eval_finite, grid_search_with, TransferConfig};
use rfad::{Error, Real, Result, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{self, RunConfig};
use crate::output::{mean_std, write_csv, write_json};
use crate::{BenchArgs, DistillArgs, EvalArgs, InfluenceArgs, TransferArgs};

/// Reference accuracy for MNIST at one image per class with fixed labels,
/// from full-scale runs (8 models, 256 channels, full training set).
const MNIST_1IPC_REFERENCE: (f64, f64) = (96.7, 0.2);

#[derive(Serialize)]
struct RunManifest<'a> {
    rfad_version: &'static str,
    command: &'static str,
    dataset: DatasetName,
    dataset_root: String,
    train_hash: String,
    test_hash: String,
    config: &'a DistillConfig,
    config_hash: String,
    threads: usize,
    seed: u64,
    coreset_size: usize,
    corrupted_entries: usize,
    coreset_hash: String,
    checkpoint: String,
    best_iteration: usize,
    best_validation_loss: f64,
    stopped_early: bool,
    iterations_run: usize,
    total_seconds: f64,
    timings: &'a [IterationRecord],
}

#[derive(Serialize)]
struct HistoryRow {
    iteration: usize,
    loss: f64,
    seconds: f64,
    validation_loss: Option<f64>,
}

fn check_input<T>(coreset: &Coreset<T>, data: &Dataset<T>, dataset: &str) -> Result<()>
where
    T: rfad::Scalar,
{
    if coreset.spec.input != data.input_shape() {
        return Err(Error::Config(format!(
            "checkpoint expects {:?} images but {dataset} has {:?}",
            coreset.spec.input,
            data.input_shape()
        )));
    }
    Ok(())
}

fn head<T: rfad::Scalar>(data: Dataset<T>, n: usize) -> Dataset<T> {
    if n == 0 || n >= data.len() {
        data
    } else {
        data.subset(&(0..n).collect::<Vec<_>>())
    }
}

pub fn distill(a: DistillArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    let (dataset, cfg) = config::merge(&a, file)?;
    let root = data_root();
    let (train, test) = load_preprocessed::<Real>(&root, dataset)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let start = Instant::now();
    let period = cfg.validation_period;
    let out = distill_run_with(&train, &cfg, |it, loss| {
        if (it + 1) % period == 0 {
            eprintln!("iteration {:>6}  loss {loss:.5}", it + 1);
        }
    })?;
    let total_seconds = start.elapsed().as_secs_f64();

    let ckpt = a.out.join("coreset.ckpt");
    checkpoint::save(&ckpt, &out.coreset, &cfg.hash())?;
    let history: Vec<HistoryRow> = out
        .history
        .iterations
        .iter()
        .map(|r| HistoryRow {
            iteration: r.iteration + 1,
            loss: r.loss,
            seconds: r.seconds,
            validation_loss: out
                .history
                .validation
                .iter()
                .find(|v| v.iteration == r.iteration + 1)
                .map(|v| v.loss),
        })
        .collect();
    write_csv(&a.out.join("history.csv"), &history)?;
    let manifest = RunManifest {
        rfad_version: env!("CARGO_PKG_VERSION"),
        command: "distill",
        dataset,
        dataset_root: root.display().to_string(),
        train_hash: train.content_hash(),
        test_hash: test.content_hash(),
        config: &cfg,
        config_hash: cfg.hash(),
        threads: rayon::current_num_threads(),
        seed: cfg.seed,
        coreset_size: out.coreset.len(),
        corrupted_entries: out.coreset.frozen_count(),
        coreset_hash: out.coreset.content_hash(),
        checkpoint: ckpt.display().to_string(),
        best_iteration: out.history.best_iteration,
        best_validation_loss: out.history.best_validation_loss,
        stopped_early: out.history.stopped_early,
        iterations_run: out.history.iterations.len(),
        total_seconds,
        timings: &out.history.iterations,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!(
        "coreset of {} images written to {} (best iteration {}, validation loss {:.5}, {:.1}s)",
        out.coreset.len(),
        ckpt.display(),
        out.history.best_iteration,
        out.history.best_validation_loss,
        total_seconds
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    kernel: String,
    seed: Option<u64>,
    n_eval: Option<usize>,
    channels_eval: Option<usize>,
    test_size: usize,
    accuracy: f64,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (coreset, _) = checkpoint::load::<Real>(&a.checkpoint)?;
    let name = DatasetName::parse(&a.dataset)?;
    let (_, test) = load_preprocessed::<Real>(&data_root(), name)?;
    check_input(&coreset, &test, &a.dataset)?;
    let test = head(test, a.test_size);
    let kernels: Vec<EvalKernel> = match a.kernel.as_str() {
        "empirical" => (0..a.seeds as u64)
            .map(|seed| EvalKernel::Empirical {
                n_models: a.n_eval,
                channels: a.channels_eval,
                seed,
            })
            .collect(),
        "exact-fc-nngp" => vec![EvalKernel::ExactFcNngp],
        "exact-fc-ntk" => vec![EvalKernel::ExactFcNtk],
        other => {
            return Err(Error::Config(format!(
                "unknown kernel '{other}' (expected empirical, exact-fc-nngp or exact-fc-ntk)"
            )))
        }
    };
    println!("kernel\tseed\taccuracy");
    let mut rows = Vec::new();
    for k in kernels {
        let acc = evaluate_coreset(&coreset, &test, k, a.lambda0)?;
        let (seed, n_eval, channels_eval) = match k {
            EvalKernel::Empirical {
                n_models,
                channels,
                seed,
            } => (Some(seed), Some(n_models), Some(channels)),
            _ => (None, None, None),
        };
        println!(
            "{}\t{}\t{:.2}",
            a.kernel,
            seed.map_or("-".into(), |s| s.to_string()),
            100.0 * acc
        );
        rows.push(EvalRow {
            kernel: a.kernel.clone(),
            seed,
            n_eval,
            channels_eval,
            test_size: test.len(),
            accuracy: acc,
        });
    }
    let accs: Vec<f64> = rows.iter().map(|r| 100.0 * r.accuracy).collect();
    let (m, s) = mean_std(&accs);
    println!(
        "accuracy: {m:.2} ± {s:.2} % over {} evaluation(s), {} test points",
        accs.len(),
        test.len()
    );
    if name == DatasetName::Mnist && coreset.len() == coreset.num_classes {
        let (rm, rs) = MNIST_1IPC_REFERENCE;
        println!(
            "reference (published full-scale MNIST, 1 img/cls, fixed labels; not this run): {rm} ± {rs} %"
        );
    }
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.with_file_name("eval.csv"));
    write_csv(&out, &rows)
}

fn cache_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("RFAD_CACHE_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(".rfad-cache"))
}

fn read_image(path: &Path, numel: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let vals = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Data(format!("{}: '{t}' is not a number", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != numel {
        return Err(Error::Data(format!(
            "{}: expected {numel} pixel values, found {}",
            path.display(),
            vals.len()
        )));
    }
    Ok(vals)
}

fn clamp_k(k: usize, n: usize, what: &str) -> usize {
    if k > n {
        eprintln!("warning: k = {k} exceeds the {n} {what}; showing {n}");
    }
    k.min(n)
}

pub fn influence(a: InfluenceArgs) -> Result<()> {
    let (coreset, _) = checkpoint::load::<f64>(&a.checkpoint)?;
    let name = DatasetName::parse(&a.dataset)?;
    let (train, test) = load_preprocessed::<f64>(&data_root(), name)?;
    check_input(&coreset, &test, &a.dataset)?;
    let (query, true_class, label) = match (a.test_index, &a.image) {
        (Some(i), _) => {
            if i >= test.len() {
                return Err(Error::Config(format!(
                    "test index {i} out of range for {} test points",
                    test.len()
                )));
            }
            (test.images.select_rows(&[i]), Some(test.labels[i]), format!("test index {i}"))
        }
        (None, Some(p)) => {
            let shape = test.input_shape();
            let raw = read_image(p, shape.numel())?;
            let t = Tensor::new(&[1, shape.channels, shape.height, shape.width], raw)?;
            (train.preprocessing.apply(&t)?, None, p.display().to_string())
        }
        (None, None) => return Err(Error::Usage("pass --test-index or --image".into())),
    };
    let table_set = head(train, a.train_size);
    let kernel = EvalKernel::Empirical {
        n_models: a.n_eval,
        channels: a.channels_eval,
        seed: a.eval_seed,
    };
    let key = hex::encode(Sha256::digest(
        format!("{}:{}", kernel_hash(&kernel, a.lambda0), table_set.content_hash()).as_bytes(),
    ));
    let coreset_hash = coreset.content_hash();
    let dir = cache_dir(a.cache_dir);
    let path = dir.join(format!("influence-{}-{}.bin", &coreset_hash[..16], &key[..16]));

    let start = Instant::now();
    let (model, k_query, cache, reused) =
        match InfluenceCache::load_matching(&path, &coreset_hash, &key) {
            Some(c) => {
                let (m, kq) = KernelModel::from_coreset(&coreset, &query, kernel, a.lambda0)?;
                (m, kq, c, true)
            }
            None => {
                let all = Tensor::concat_rows(&[&query, &table_set.images])?;
                let (m, k_all) = KernelModel::from_coreset(&coreset, &all, kernel, a.lambda0)?;
                let rows: Vec<usize> = (1..k_all.shape()[0]).collect();
                let k_table = k_all.select_rows(&rows);
                let set = m.loo_set()?;
                let table = set.table(&k_table)?;
                let predicted = argmax_rows(&krr_predict(&k_table, &set.full)?);
                let c = InfluenceCache {
                    coreset_hash: coreset_hash.clone(),
                    kernel_hash: key.clone(),
                    table,
                    predicted,
                };
                fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                c.save(&path)?;
                (m, k_all.select_rows(&[0]), c, false)
            }
        };
    let set = model.loo_set()?;
    let z = set.embedding(k_query.row(0))?;
    eprintln!(
        "influence table for {} training points {} in {:.2}s ({})",
        cache.table.len(),
        if reused { "loaded" } else { "built" },
        start.elapsed().as_secs_f64(),
        path.display()
    );

    let p_query = predict_proba(&krr_predict(&k_query, &set.full)?, &model.head)?;
    let pred_query = argmax_rows(&p_query)[0];
    let support_pred = argmax_rows(&krr_predict(&model.k_ss, &set.full)?);
    println!(
        "# query {label}: predicted class {pred_query}, true class {}",
        true_class.map_or("unknown".into(), |c| c.to_string())
    );
    println!("# coreset elements by influence score I");
    println!("rank\tindex\tI\tpredicted\ttrue");
    let k = clamp_k(a.k, coreset.len(), "coreset elements");
    for (r, (i, score)) in z.ranked().into_iter().take(k).enumerate() {
        println!("{}\t{i}\t{score:.6}\t{}\t{}", r + 1, support_pred[i], coreset.class_of[i]);
    }
    println!("# training points by influence-embedding similarity J");
    println!("rank\tindex\tJ\tpredicted\ttrue");
    let k = clamp_k(a.k, cache.table.len(), "table points");
    for (r, (j, sim)) in similar_training_points(&z, &cache.table, k).into_iter().enumerate() {
        println!("{}\t{j}\t{sim:.6}\t{}\t{}", r + 1, cache.predicted[j], table_set.labels[j]);
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    support_size: usize,
    n_models: usize,
    mean_seconds: f64,
    std_seconds: f64,
    repeats: usize,
    kip_seconds: f64,
}

#[derive(Serialize)]
struct FitRow {
    axis: &'static str,
    fixed: usize,
    slope: f64,
    intercept: f64,
    r2: f64,
    kip_crossover_size: Option<f64>,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let name = DatasetName::parse(&a.dataset)?;
    let (train, _) = load_preprocessed::<Real>(&data_root(), name)?;
    let cfg = BenchConfig {
        sizes: a.sizes,
        models: a.models,
        channels: a.channels,
        batch_size: a.batch_size,
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
    };
    let rows = run_grid(&train, &cfg, |r| {
        eprintln!(
            "|S| = {:>4}  N = {:>2}  {:.4} ± {:.4} s/iteration",
            r.support_size, r.n_models, r.mean_seconds, r.std_seconds
        );
    })?;
    let spec = DistillConfig {
        channels: cfg.channels,
        ..DistillConfig::default()
    }
    .network_spec(train.input_shape());
    let probe: Vec<usize> = (0..4.min(train.len())).collect();
    let kip = calibrate_kip(&spec, &train.images.select_rows(&probe), a.kip_entries)?;
    let out_rows: Vec<BenchRow> = rows
        .iter()
        .map(|r| BenchRow {
            support_size: r.support_size,
            n_models: r.n_models,
            mean_seconds: r.mean_seconds,
            std_seconds: r.std_seconds,
            repeats: r.repeats,
            kip_seconds: kip_seconds(kip.entry_seconds, cfg.batch_size, r.support_size),
        })
        .collect();
    write_csv(&a.out, &out_rows)?;

    let fits = scaling_fits(&rows);
    let mut fit_rows = Vec::new();
    println!("exact kernel entry: {:.3} ms", 1e3 * kip.entry_seconds);
    println!("axis\tfixed\tslope\tintercept\tR2\tkip_crossover_size");
    for (n, f) in &fits.by_size {
        let cross = crossover(f, kip.entry_seconds, cfg.batch_size);
        println!(
            "size\tN={n}\t{:.6}\t{:.4}\t{:.4}\t{}",
            f.slope,
            f.intercept,
            f.r2,
            cross.map_or("none".into(), |c| format!("{c:.3}"))
        );
        fit_rows.push(FitRow {
            axis: "size",
            fixed: *n,
            slope: f.slope,
            intercept: f.intercept,
            r2: f.r2,
            kip_crossover_size: cross,
        });
    }
    for (s, f) in &fits.by_models {
        println!("models\t|S|={s}\t{:.6}\t{:.4}\t{:.4}\t-", f.slope, f.intercept, f.r2);
        fit_rows.push(FitRow {
            axis: "models",
            fixed: *s,
            slope: f.slope,
            intercept: f.intercept,
            r2: f.r2,
            kip_crossover_size: None,
        });
    }
    write_csv(&a.out.with_extension("fits.csv"), &fit_rows)
}

#[derive(Serialize)]
struct TransferRow {
    seed: u64,
    lr: f64,
    weight_decay: f64,
    label_scale: f64,
    centering: bool,
    diverged: bool,
    validation_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
    best_step: Option<usize>,
    steps_run: Option<usize>,
    selected: bool,
}

pub fn transfer(a: TransferArgs) -> Result<()> {
    let (coreset, _) = checkpoint::load::<Real>(&a.checkpoint)?;
    let name = DatasetName::parse(&a.dataset)?;
    let (train, test) = load_preprocessed::<Real>(&data_root(), name)?;
    check_input(&coreset, &test, &a.dataset)?;
    let test = head(test, a.test_size);
    let cfg = TransferConfig {
        channels: a.channels,
        learning_rates: a.lrs,
        weight_decays: a.wds,
        label_scales: a.alphas,
        centering: !a.no_centering,
        steps: a.steps,
        patience: a.patience,
        eval_period: a.eval_period,
        batch_size: a.batch_size,
        ..TransferConfig::default()
    };
    cfg.validate()?;
    let mut rows: Vec<TransferRow> = Vec::new();
    let mut selected_acc = Vec::new();
    for seed in 0..a.seeds {
        let (validation, _) = train.split(a.validation_size, seed)?;
        let first = rows.len();
        let result = grid_search_with(&coreset, &cfg, &validation, seed, |p, outcome| {
            let test_accuracy = outcome.map(|o| eval_finite(&o.model, &test)).transpose()?;
            eprintln!(
                "seed {seed} lr {} wd {} alpha {}: {}",
                p.lr,
                p.weight_decay,
                p.label_scale,
                match (outcome, test_accuracy) {
                    (Some(o), Some(t)) => format!(
                        "validation {:.2} %, test {:.2} %",
                        100.0 * o.validation_accuracy,
                        100.0 * t
                    ),
                    _ => "diverged".into(),
                }
            );
            rows.push(TransferRow {
                seed,
                lr: p.lr,
                weight_decay: p.weight_decay,
                label_scale: p.label_scale,
                centering: cfg.centering,
                diverged: outcome.is_none(),
                validation_accuracy: outcome.map(|o| o.validation_accuracy),
                test_accuracy,
                best_step: outcome.map(|o| o.best_step),
                steps_run: outcome.map(|o| o.steps_run),
                selected: false,
            });
            Ok(())
        })?;
        let chosen = &mut rows[first + result.best_index];
        chosen.selected = true;
        println!(
            "seed {seed}: selected lr {} wd {} alpha {} -> test {}",
            chosen.lr,
            chosen.weight_decay,
            chosen.label_scale,
            chosen
                .test_accuracy
                .map_or("diverged".into(), |t| format!("{:.2} %", 100.0 * t))
        );
        if let Some(t) = chosen.test_accuracy {
            selected_acc.push(100.0 * t);
        }
    }
    let (m, s) = mean_std(&selected_acc);
    println!(
        "centering {}: test accuracy {m:.2} ± {s:.2} % over {} seed(s)",
        if cfg.centering { "on" } else { "off" },
        selected_acc.len()
    );
    write_csv(&a.out, &rows)
}
