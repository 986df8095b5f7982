use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn rfad() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rfad"));
    c.arg("--threads").arg("1");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &[&str] = &[
    "--ipc", "1", "--n-nets", "1", "--channels", "8", "--batch-size", "256", "--max-iters", "20",
    "--validation-size", "200", "--validation-models", "2", "--validation-period", "10",
    "--patience", "20",
];

fn distill(out: &Path, extra: &[&str]) -> Output {
    ok(rfad().arg("distill").args(TINY).args(extra).arg("--out").arg(out))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn checkpoint(dir: &tempfile::TempDir) -> PathBuf {
    let out = dir.path().join("run");
    distill(&out, &[]);
    out.join("coreset.ckpt")
}

#[test]
fn invalid_config_exits_with_2() {
    let out = run(rfad().args(["distill", "--rho", "1.5"]));
    assert_eq!(out.status.code(), Some(2));
    let out = run(rfad().args(["distill", "--loss", "hinge"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(rfad()
        .env("RFAD_DATA_ROOT", dir.path())
        .arg("distill")
        .args(TINY)
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn divergence_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.toml");
    fs::write(&cfg, "dataset = \"mnist\"\n[distill]\nlr_coreset = 1e30\nlearn_transform = false\n").unwrap();
    let out = run(rfad()
        .arg("distill")
        .arg("--config")
        .arg(&cfg)
        .args(TINY)
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn manifest_records_corruption_and_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    distill(&out, &["--rho", "0.9", "--loss", "mse"]);
    let m = manifest(&out);
    let entries = 10 * 28 * 28;
    assert_eq!(m["corrupted_entries"], (0.9 * entries as f64).floor() as u64);
    assert_eq!(m["config"]["loss"], "mse");
    assert_eq!(m["config"]["rho"], 0.9);
    assert_eq!(m["coreset_size"], 10);
    assert_eq!(m["iterations_run"], 20);
    let history = csv_rows(&out.join("history.csv"));
    assert_eq!(history.len(), 20);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[distill]\nseed = 7\nchannels = 64\n").unwrap();
    let out = dir.path().join("run");
    ok(rfad().arg("distill").arg("--config").arg(&cfg).args(TINY).arg("--out").arg(&out));
    let m = manifest(&out);
    assert_eq!(m["config"]["seed"], 7);
    assert_eq!(m["config"]["channels"], 8);
}

#[test]
fn distill_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    distill(&a, &["--seed", "3"]);
    distill(&b, &["--seed", "3"]);
    assert_eq!(
        fs::read(a.join("coreset.ckpt")).unwrap(),
        fs::read(b.join("coreset.ckpt")).unwrap()
    );
    assert_eq!(manifest(&a)["coreset_hash"], manifest(&b)["coreset_hash"]);
}

#[test]
fn eval_writes_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(&dir);
    let csv_out = dir.path().join("eval.csv");
    let out = ok(rfad()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--n-eval", "2", "--channels-eval", "16", "--seeds", "2", "--test-size", "100"])
        .arg("--out")
        .arg(&csv_out));
    let rows = csv_rows(&csv_out);
    assert_eq!(rows.len(), 2);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("reference (published full-scale MNIST"));

    let out = run(rfad().arg("eval").arg("--checkpoint").arg(&ckpt).args(["--kernel", "laplace"]));
    assert_eq!(out.status.code(), Some(2));
    let out = run(rfad().arg("eval").arg("--checkpoint").arg(&ckpt).args(["--kernel", "exact-fc-nngp"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn influence_cache_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(&dir);
    let cache = dir.path().join("cache");
    let query = |idx: &str| {
        let mut c = rfad();
        c.arg("influence")
            .arg("--checkpoint")
            .arg(&ckpt)
            .args(["--test-index", idx, "--k", "3", "--train-size", "400"])
            .args(["--n-eval", "2", "--channels-eval", "16"])
            .arg("--cache-dir")
            .arg(&cache);
        c
    };
    let t = Instant::now();
    let first = ok(&mut query("0"));
    let cold = t.elapsed();
    let t = Instant::now();
    let second = ok(&mut query("1"));
    let warm = t.elapsed();
    assert!(String::from_utf8_lossy(&first.stderr).contains("built"));
    assert!(String::from_utf8_lossy(&second.stderr).contains("loaded"));
    assert!(warm < cold, "warm {warm:?} vs cold {cold:?}");
    let stdout = String::from_utf8_lossy(&second.stdout);
    let ranks = stdout.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count();
    assert_eq!(ranks, 6);
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
}

#[test]
fn transfer_grid_has_a_row_per_point_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(&dir);
    let csv_out = dir.path().join("transfer.csv");
    ok(rfad()
        .arg("transfer")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--seeds", "2", "--channels", "4", "--steps", "4", "--patience", "4"])
        .args(["--eval-period", "2", "--validation-size", "50", "--test-size", "50"])
        .arg("--out")
        .arg(&csv_out));
    let rows = csv_rows(&csv_out);
    assert_eq!(rows.len(), 32 * 2);
    let header = csv::Reader::from_path(&csv_out).unwrap().headers().unwrap().clone();
    let sel = header.iter().position(|h| h == "selected").unwrap();
    assert_eq!(rows.iter().filter(|r| &r[sel] == "true").count(), 2);

    let out = run(rfad()
        .arg("transfer")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--alphas", "0.5"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_grid_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let csv_out = dir.path().join("bench.csv");
    ok(rfad()
        .args(["bench", "--sizes", "10,20,30", "--models", "1,2", "--channels", "4"])
        .args(["--batch-size", "32", "--repeats", "2", "--warmup", "1", "--kip-entries", "1"])
        .arg("--out")
        .arg(&csv_out));
    assert_eq!(csv_rows(&csv_out).len(), 6);
    assert_eq!(csv_rows(&csv_out.with_extension("fits.csv")).len(), 2 + 3);
}
