//! Dataset ingestion and preprocessing.

mod cifar;
mod idx;
mod preprocess;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::InputShape;
use crate::rng::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use cifar::{load_cifar_binary, CifarVariant, CIFAR_IMAGE_BYTES};
pub use idx::{load_idx, write_idx};
pub use preprocess::{standardize, zca_fit, Standardizer, ZcaTransform};

/// How raw `[0, 1]` pixels were mapped into the stored space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Preprocessing {
    None,
    Standardize(Standardizer),
    Zca(ZcaTransform),
}

impl Preprocessing {
    pub fn apply<T: Scalar>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Preprocessing::None => Ok(images.clone()),
            Preprocessing::Standardize(s) => Ok(s.apply(images)),
            Preprocessing::Zca(z) => z.apply(images),
        }
    }
}

/// Images `[N, C, H, W]` with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub preprocessing: Preprocessing,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4("Dataset::new")?;
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            preprocessing: Preprocessing::None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> InputShape {
        let s = self.images.shape();
        InputShape::new(s[1], s[2], s[3])
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            preprocessing: self.preprocessing.clone(),
        }
    }

    /// Indices of each class in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Labels encoded as `[N, C]` one-hot rows shifted by `-1/C`.
    pub fn centered_one_hot(&self) -> Tensor<T> {
        centered_one_hot(&self.labels, self.num_classes)
    }

    /// Shuffles with `seed` and splits off the first `n_first` examples.
    pub fn split(&self, n_first: usize, seed: u64) -> Result<(Self, Self)> {
        if n_first > self.len() {
            return Err(Error::Config(format!(
                "cannot split {n_first} examples from a dataset of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng(seed));
        let (a, b) = idx.split_at(n_first);
        Ok((self.subset(a), self.subset(b)))
    }

    /// SHA-256 over shape, pixel bits and labels, as hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Fraction of the most common class.
    pub fn majority_rate(&self) -> f64 {
        let counts = self.class_indices();
        let max = counts.iter().map(Vec::len).max().unwrap_or(0);
        max as f64 / self.len().max(1) as f64
    }
}

pub fn centered_one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Tensor<T> {
    let shift = T::one() / T::from_usize(num_classes).expect("class count fits");
    let mut y = Tensor::full(&[labels.len(), num_classes], -shift);
    for (i, &l) in labels.iter().enumerate() {
        y.set2(i, l, T::one() - shift);
    }
    y
}

/// Reads a whole file, transparently inflating gzip content.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Dataset root: `$RFAD_DATA_ROOT`, else `data/` at the workspace root.
pub fn data_root() -> PathBuf {
    std::env::var_os("RFAD_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Self::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fashionmnist" => Ok(Self::FashionMnist),
            "cifar10" | "cifar-10" => Ok(Self::Cifar10),
            "cifar100" | "cifar-100" => Ok(Self::Cifar100),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashion-mnist",
            Self::Cifar10 => "cifar-10-batches-bin",
            Self::Cifar100 => "cifar-100-binary",
        }
    }

    fn fetch_hint(self) -> &'static str {
        match self {
            Self::Mnist | Self::FashionMnist => {
                "place train-images-idx3-ubyte[.gz], train-labels-idx1-ubyte[.gz], \
                 t10k-images-idx3-ubyte[.gz] and t10k-labels-idx1-ubyte[.gz] in this directory"
            }
            Self::Cifar10 => {
                "download cifar-10-binary.tar.gz from https://www.cs.toronto.edu/~kriz/ and extract it here"
            }
            Self::Cifar100 => {
                "download cifar-100-binary.tar.gz from https://www.cs.toronto.edu/~kriz/ and extract it here"
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
}

/// Loads raw `[0, 1]` pixels of a named dataset from `root`.
pub fn load_named<T: Scalar>(root: &Path, name: DatasetName, split: Split) -> Result<Dataset<T>> {
    let dir = root.join(name.dir_name());
    let missing = |what: &str| {
        Error::Data(format!(
            "{what} not found under {}: {}",
            dir.display(),
            name.fetch_hint()
        ))
    };
    match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let images = find_file(&dir, &format!("{prefix}-images-idx3-ubyte"))
                .ok_or_else(|| missing("image file"))?;
            let labels = find_file(&dir, &format!("{prefix}-labels-idx1-ubyte"))
                .ok_or_else(|| missing("label file"))?;
            load_idx(&images, &labels)
        }
        DatasetName::Cifar10 => {
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            if let Some(p) = files.iter().find(|p| !p.exists()) {
                return Err(missing(&p.display().to_string()));
            }
            load_cifar_binary(&files, CifarVariant::Cifar10)
        }
        DatasetName::Cifar100 => {
            let file = dir.join(match split {
                Split::Train => "train.bin",
                Split::Test => "test.bin",
            });
            if !file.exists() {
                return Err(missing(&file.display().to_string()));
            }
            load_cifar_binary(&[file], CifarVariant::Cifar100)
        }
    }
}

/// Train/test pair preprocessed with training statistics: standardization for
/// grayscale sets, ZCA (λ = 0.1) for color sets.
pub fn load_preprocessed<T: Scalar>(
    root: &Path,
    name: DatasetName,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut train = load_named::<T>(root, name, Split::Train)?;
    let mut test = load_named::<T>(root, name, Split::Test)?;
    let pre = match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            Preprocessing::Standardize(Standardizer::fit(&train.images)?)
        }
        DatasetName::Cifar10 | DatasetName::Cifar100 => {
            Preprocessing::Zca(zca_fit(&train.images, 0.1)?)
        }
    };
    train.images = pre.apply(&train.images)?;
    test.images = pre.apply(&test.images)?;
    train.preprocessing = pre.clone();
    test.preprocessing = pre;
    Ok((train, test))
}
