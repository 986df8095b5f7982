//! Leave-one-out influence of coreset elements and influence-embedding search.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::distill::{support_kernels, Coreset, EvalKernel};
use crate::error::{Error, Result};
use crate::krr::{self, KrrSolution, PlattHead};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `z[i, c] = p(c | S) - p(c | S \ i)` for one query point.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceEmbedding {
    pub z: Tensor<f64>,
}

impl InfluenceEmbedding {
    /// `I_i = Σ_c |z[i, c]|`.
    pub fn scores(&self) -> Vec<f64> {
        let c = self.z.shape()[1];
        self.z
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|v| v.abs()).sum())
            .collect()
    }

    /// Support indices by decreasing influence; ties keep the lower index.
    pub fn ranked(&self) -> Vec<(usize, f64)> {
        let mut r: Vec<(usize, f64)> = self.scores().into_iter().enumerate().collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        r
    }
}

/// KRR with Platt probabilities over a fixed support kernel.
#[derive(Debug)]
pub struct KernelModel {
    pub k_ss: Tensor<f64>,
    pub y_s: Tensor<f64>,
    pub head: PlattHead,
    pub lambda0: f64,
    solves: AtomicUsize,
}

impl KernelModel {
    pub fn new(k_ss: Tensor<f64>, y_s: Tensor<f64>, head: PlattHead, lambda0: f64) -> Result<Self> {
        let (s, s2) = k_ss.dims2("KernelModel")?;
        if s != s2 || y_s.shape()[0] != s {
            return Err(Error::dim("KernelModel", "support size", s, y_s.shape()[0]));
        }
        Ok(Self {
            k_ss,
            y_s,
            head,
            lambda0,
            solves: AtomicUsize::new(0),
        })
    }

    /// Support kernel of `coreset` and its kernel against `queries`.
    pub fn from_coreset<T: Scalar>(
        coreset: &Coreset<T>,
        queries: &Tensor<T>,
        kernel: EvalKernel,
        lambda0: f64,
    ) -> Result<(Self, Tensor<f64>)> {
        let (k_qs, k_ss) = support_kernels(&[coreset], queries, kernel)?
            .pop()
            .expect("one coreset");
        let model = Self::new(k_ss, coreset.labels.cast(), coreset.platt, lambda0)?;
        Ok((model, k_qs))
    }

    pub fn support_len(&self) -> usize {
        self.k_ss.shape()[0]
    }

    /// Number of linear solves issued so far.
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    fn check_loo(&self, i: usize) -> Result<()> {
        let s = self.support_len();
        if s < 2 {
            return Err(Error::Domain(
                "leave-one-out needs at least two support points".into(),
            ));
        }
        if i >= s {
            return Err(Error::dim("loo", "support index", format!("< {s}"), i));
        }
        Ok(())
    }

    pub fn full_solution(&self) -> Result<KrrSolution> {
        self.solves.fetch_add(1, Ordering::Relaxed);
        krr::krr_fit(&self.k_ss, &self.y_s, self.lambda0)
    }

    /// Direct re-solve with row and column `i` removed; `λ` is recomputed
    /// from the reduced kernel.
    pub fn loo_solution(&self, i: usize) -> Result<KrrSolution> {
        self.check_loo(i)?;
        let keep: Vec<usize> = (0..self.support_len()).filter(|&j| j != i).collect();
        let k = drop_index(&self.k_ss, &keep, true);
        let y = self.y_s.select_rows(&keep);
        self.solves.fetch_add(1, Ordering::Relaxed);
        krr::krr_fit(&k, &y, self.lambda0)
    }

    /// Probabilities for query rows `k_xs` with support element `i` deleted.
    pub fn loo_predict(&self, k_xs: &Tensor<f64>, i: usize) -> Result<Tensor<f64>> {
        let sol = self.loo_solution(i)?;
        let keep: Vec<usize> = (0..self.support_len()).filter(|&j| j != i).collect();
        let preds = krr::krr_predict(&drop_index(k_xs, &keep, false), &sol)?;
        krr::predict_proba(&preds, &self.head)
    }

    /// Full-support probabilities for query rows `k_xs`.
    pub fn predict_proba(&self, k_xs: &Tensor<f64>) -> Result<Tensor<f64>> {
        let preds = krr::krr_predict(k_xs, &self.full_solution()?)?;
        krr::predict_proba(&preds, &self.head)
    }

    /// The full solution and all `S` leave-one-out solutions.
    pub fn loo_set(&self) -> Result<LooSet> {
        self.check_loo(0)?;
        let full = self.full_solution()?;
        let loo = (0..self.support_len())
            .map(|i| self.loo_solution(i))
            .collect::<Result<_>>()?;
        Ok(LooSet {
            full,
            loo,
            head: self.head,
            predictions: AtomicUsize::new(0),
        })
    }
}

/// Columns (and rows, when `square`) listed in `keep`.
fn drop_index(k: &Tensor<f64>, keep: &[usize], square: bool) -> Tensor<f64> {
    let rows: Vec<usize> = if square {
        keep.to_vec()
    } else {
        (0..k.shape()[0]).collect()
    };
    let mut out = Vec::with_capacity(rows.len() * keep.len());
    for &r in &rows {
        let row = k.row(r);
        out.extend(keep.iter().map(|&c| row[c]));
    }
    Tensor::new(&[rows.len(), keep.len()], out).expect("consistent shape")
}

/// Precomputed solutions shared by every query.
#[derive(Debug)]
pub struct LooSet {
    pub full: KrrSolution,
    pub loo: Vec<KrrSolution>,
    pub head: PlattHead,
    predictions: AtomicUsize,
}

impl LooSet {
    /// KRR predictions issued so far; `S + 1` per embedded query.
    pub fn prediction_count(&self) -> usize {
        self.predictions.load(Ordering::Relaxed)
    }

    /// Embedding of one query from its kernel row against the full support.
    pub fn embedding(&self, k_xs: &[f64]) -> Result<InfluenceEmbedding> {
        let s = self.loo.len();
        if k_xs.len() != s {
            return Err(Error::dim("embedding", "kernel row", s, k_xs.len()));
        }
        let row = Tensor::new(&[1, s], k_xs.to_vec())?;
        let p_full = krr::predict_proba(&krr::krr_predict(&row, &self.full)?, &self.head)?;
        let c = p_full.len();
        let mut z = Vec::with_capacity(s * c);
        for (i, sol) in self.loo.iter().enumerate() {
            let reduced: Vec<f64> = k_xs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .collect();
            let r = Tensor::new(&[1, s - 1], reduced)?;
            let p = krr::predict_proba(&krr::krr_predict(&r, sol)?, &self.head)?;
            z.extend(p_full.data().iter().zip(p.data()).map(|(a, b)| a - b));
        }
        self.predictions.fetch_add(s + 1, Ordering::Relaxed);
        Ok(InfluenceEmbedding {
            z: Tensor::new(&[s, c], z)?,
        })
    }

    /// One embedding per row of `k_qs`, computed in parallel.
    pub fn table(&self, k_qs: &Tensor<f64>) -> Result<Vec<InfluenceEmbedding>> {
        let (q, _) = k_qs.dims2("influence table")?;
        (0..q)
            .into_par_iter()
            .map(|r| self.embedding(k_qs.row(r)))
            .collect()
    }
}

/// Influence scores `I_i` of every support element for one query row.
pub fn influence_scores(model: &KernelModel, k_xs: &[f64]) -> Result<Vec<f64>> {
    Ok(model.loo_set()?.embedding(k_xs)?.scores())
}

/// Cosine similarity of flattened embeddings; zero when either norm is zero.
pub fn cosine(a: &InfluenceEmbedding, b: &InfluenceEmbedding) -> f64 {
    let (x, y) = (a.z.data(), b.z.data());
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Top-`k` table rows by cosine similarity to `query`; ties keep the lower index.
pub fn similar_training_points(
    query: &InfluenceEmbedding,
    table: &[InfluenceEmbedding],
    k: usize,
) -> Vec<(usize, f64)> {
    let mut sims: Vec<(usize, f64)> = table
        .iter()
        .enumerate()
        .map(|(j, z)| (j, cosine(query, z)))
        .collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(k);
    sims
}

/// Cache key component for an evaluation kernel.
pub fn kernel_hash(kernel: &EvalKernel, lambda0: f64) -> String {
    let json = serde_json::to_string(&(kernel, lambda0)).expect("kernel serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

const CACHE_MAGIC: &[u8; 8] = b"RFADINFL";
const CACHE_VERSION: u32 = 1;

/// Influence table on disk, keyed by coreset and kernel hashes.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceCache {
    pub coreset_hash: String,
    pub kernel_hash: String,
    pub table: Vec<InfluenceEmbedding>,
    /// Full-coreset predicted class of each table point.
    pub predicted: Vec<usize>,
}

impl InfluenceCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (s, c) = self
            .table
            .first()
            .map_or((0, 0), |z| (z.z.shape()[0], z.z.shape()[1]));
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for key in [&self.coreset_hash, &self.kernel_hash] {
            out.extend_from_slice(&(key.len() as u64).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
        }
        for d in [self.table.len(), s, c] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for z in &self.table {
            for v in z.z.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.predicted.len() as u64).to_le_bytes());
        for &p in &self.predicted {
            out.extend_from_slice(&(p as u64).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != CACHE_MAGIC {
            return Err(Cursor::bad("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CACHE_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CACHE_VERSION,
            });
        }
        let coreset_hash = r.string()?;
        let kernel_hash = r.string()?;
        let (q, s, c) = (r.u64()?, r.u64()?, r.u64()?);
        let mut table = Vec::with_capacity(q);
        for _ in 0..q {
            let vals: Vec<f64> = r
                .take(s * c * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            table.push(InfluenceEmbedding {
                z: Tensor::new(&[s, c], vals)?,
            });
        }
        let n = r.u64()?;
        let predicted = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(Cursor::bad("trailing bytes"));
        }
        Ok(Self {
            coreset_hash,
            kernel_hash,
            table,
            predicted,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// The cached table when the file exists and both keys match.
    pub fn load_matching(path: &Path, coreset_hash: &str, kernel_hash: &str) -> Option<Self> {
        let c = Self::load(path).ok()?;
        (c.coreset_hash == coreset_hash && c.kernel_hash == kernel_hash).then_some(c)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn bad(m: &str) -> Error {
        Error::Data(format!("influence cache: {m}"))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Self::bad("truncated"))?;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| Self::bad("truncated"))?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Self::bad("key is not utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::centered_one_hot;

    fn rbf(a: &[f64], b: &[f64]) -> Tensor<f64> {
        Tensor::from_fn(&[a.len(), b.len()], |k| {
            let d = a[k / b.len()] - b[k % b.len()];
            (-d * d).exp()
        })
    }

    fn toy(points: &[f64], labels: &[usize]) -> KernelModel {
        KernelModel::new(
            rbf(points, points),
            centered_one_hot(labels, 3),
            PlattHead::default(),
            1e-3,
        )
        .unwrap()
    }

    #[test]
    fn loo_matches_reduced_problem() {
        let pts = [0.0, 0.7, 1.9, 3.1, 4.0];
        let labels = [0, 1, 2, 0, 1];
        let m = toy(&pts, &labels);
        let q = [0.3, 2.5];
        for i in 0..pts.len() {
            let keep: Vec<usize> = (0..pts.len()).filter(|&j| j != i).collect();
            let p2: Vec<f64> = keep.iter().map(|&j| pts[j]).collect();
            let l2: Vec<usize> = keep.iter().map(|&j| labels[j]).collect();
            let reduced = toy(&p2, &l2);
            let want = reduced.predict_proba(&rbf(&q, &p2)).unwrap();
            let got = m.loo_predict(&rbf(&q, &pts), i).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn two_point_loo_is_a_scalar_ridge() {
        let pts = [0.0, 1.2];
        let m = toy(&pts, &[0, 2]);
        let q = [0.4];
        let kx = rbf(&q, &pts);
        let sol = m.loo_solution(0).unwrap();
        // Remaining point s = 1.2, k(s,s) = 1, λ = λ0·1.
        let y: Tensor<f64> = centered_one_hot(&[2], 3);
        let ks = kx.data()[1];
        let lambda = 1e-3;
        assert!((sol.lambda_effective - lambda).abs() < 1e-18);
        let pred = krr::krr_predict(&Tensor::new(&[1, 1], vec![ks]).unwrap(), &sol).unwrap();
        for c in 0..3 {
            let want = ks * y.data()[c] / (1.0 + lambda);
            assert!((pred.data()[c] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn inert_support_point_has_near_zero_influence() {
        let pts = [0.0, 1.5, 3.0];
        let mut k = Tensor::zeros(&[4, 4]);
        let base = rbf(&pts, &pts);
        for i in 0..3 {
            for j in 0..3 {
                k.data_mut()[i * 4 + j] = base.data()[i * 3 + j];
            }
        }
        let mut y = Tensor::zeros(&[4, 3]);
        y.data_mut()[..9].copy_from_slice(centered_one_hot(&[0, 1, 2], 3).data());
        let m = KernelModel::new(k, y, PlattHead::default(), 1e-3).unwrap();
        let mut kx = rbf(&[0.8], &pts).data().to_vec();
        kx.push(0.0);
        let scores = influence_scores(&m, &kx).unwrap();
        // Only the adaptive regularizer moves when the inert point leaves.
        assert!(scores[3] < 1e-3, "{scores:?}");
        assert!(scores[..3].iter().all(|&s| s > scores[3]));
    }

    #[test]
    fn single_point_support_has_no_loo() {
        let m = toy(&[1.0], &[0]);
        assert!(matches!(m.loo_solution(0), Err(Error::Domain(_))));
        assert!(m.loo_set().is_err());
    }

    #[test]
    fn counters_and_score_range() {
        let pts = [0.0, 1.0, 2.0, 3.0];
        let m = toy(&pts, &[0, 1, 2, 1]);
        let set = m.loo_set().unwrap();
        assert_eq!(m.solve_count(), pts.len() + 1);
        let q: Vec<f64> = (0..7).map(|i| i as f64 * 0.5 - 0.2).collect();
        let table = set.table(&rbf(&q, &pts)).unwrap();
        assert_eq!(set.prediction_count(), q.len() * (pts.len() + 1));
        assert_eq!(m.solve_count(), pts.len() + 1);
        for z in &table {
            assert!(z.scores().iter().all(|&s| (0.0..=2.0).contains(&s)));
            // Both probability rows sum to one, so each z row sums to zero.
            for row in z.z.data().chunks(3) {
                assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_support_point_has_little_influence() {
        let pts = [0.0, 2.0, 2.0, 4.0];
        let m = KernelModel::new(
            rbf(&pts, &pts),
            centered_one_hot(&[0, 1, 1, 2], 3),
            PlattHead::default(),
            1e-6,
        )
        .unwrap();
        let q = [1.5, 2.2];
        let full = m.predict_proba(&rbf(&q, &pts)).unwrap();
        let loo = m.loo_predict(&rbf(&q, &pts), 1).unwrap();
        for (a, b) in full.data().iter().zip(loo.data()) {
            assert!((a - b).abs() <= 1e-3 * a.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn duplicate_query_is_most_influenced_by_its_twin() {
        let pts = [0.0, 3.0, 6.0, 9.0, 12.0];
        let m = toy(&pts, &[0, 1, 2, 0, 1]);
        let set = m.loo_set().unwrap();
        let z = set.embedding(rbf(&[6.0], &pts).row(0)).unwrap();
        assert_eq!(z.ranked()[0].0, 2);
    }

    #[test]
    fn cosine_edge_cases() {
        let e = |v: Vec<f64>| InfluenceEmbedding { z: Tensor::new(&[v.len(), 1], v).unwrap() };
        let zero = e(vec![0.0, 0.0]);
        let a = e(vec![1.0, 2.0]);
        assert_eq!(cosine(&zero, &a), 0.0);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-15);
        let table = vec![e(vec![-1.0, -2.0]), e(vec![2.0, 4.0]), e(vec![2.0, 4.0]), zero];
        let top = similar_training_points(&a, &table, 3);
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let pts = [0.0, 1.0, 2.5];
        let m = toy(&pts, &[0, 1, 2]);
        let table = m.loo_set().unwrap().table(&rbf(&[0.5, 1.7], &pts)).unwrap();
        let cache = InfluenceCache {
            coreset_hash: "c0".into(),
            kernel_hash: kernel_hash(&EvalKernel::ExactFcNngp, 5e-3),
            table,
            predicted: vec![2, 0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("infl.bin");
        cache.save(&path).unwrap();
        assert_eq!(InfluenceCache::load(&path).unwrap(), cache);
        assert!(InfluenceCache::load_matching(&path, "c0", &cache.kernel_hash).is_some());
        assert!(InfluenceCache::load_matching(&path, "c1", &cache.kernel_hash).is_none());
        let other = kernel_hash(&EvalKernel::ExactFcNngp, 1e-3);
        assert!(InfluenceCache::load_matching(&path, "c0", &other).is_none());
        let bytes = cache.to_bytes();
        assert!(InfluenceCache::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
