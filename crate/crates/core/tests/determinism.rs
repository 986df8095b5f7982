mod common;

use rfad::data::DatasetName;
use rfad::distill::{distill_run, Coreset, DistillConfig};
use rfad::{checkpoint, Result};

fn tiny() -> DistillConfig {
    DistillConfig {
        img_per_class: 1,
        n_models: 2,
        channels: 8,
        batch_size: 128,
        max_iterations: 10,
        validation_size: 100,
        validation_models: 1,
        validation_period: 5,
        patience: 10,
        ..DistillConfig::default()
    }
}

fn run_on(threads: usize) -> Result<Coreset<f64>> {
    let (train, _) = common::load(DatasetName::Mnist)?;
    let train = common::to_f64(&common::head(&train, 1000));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    Ok(pool.install(|| distill_run(&train, &tiny()))?.coreset)
}

#[test]
fn same_thread_count_is_bit_identical() {
    let (a, b) = (run_on(1).unwrap(), run_on(1).unwrap());
    let cfg = tiny();
    assert_eq!(checkpoint::to_bytes(&a, &cfg.hash()), checkpoint::to_bytes(&b, &cfg.hash()));
}

#[test]
fn thread_count_changes_values_by_at_most_roundoff() {
    let (a, b) = (run_on(1).unwrap(), run_on(3).unwrap());
    assert!(a.base_images.max_abs_diff(&b.base_images) <= 1e-12);
    assert!(a.transform.max_abs_diff(&b.transform) <= 1e-12);
    assert!((a.platt.log_tau - b.platt.log_tau).abs() <= 1e-12);
}
