use std::path::PathBuf;

use super::{read_maybe_gz, Dataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label is kept.
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }
}

/// Concatenates CIFAR binary batch files into one `[N, 3, 32, 32]` dataset.
pub fn load_cifar_binary<T: Scalar>(paths: &[PathBuf], variant: CifarVariant) -> Result<Dataset<T>> {
    let record = variant.label_bytes() + CIFAR_IMAGE_BYTES;
    let inv = T::one() / T::from_f64_lossy(255.0);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % record != 0 {
            return Err(Error::RecordSize {
                path: path.clone(),
                len: bytes.len() as u64,
                record,
            });
        }
        for rec in bytes.chunks_exact(record) {
            labels.push(rec[variant.label_bytes() - 1] as usize);
            data.extend(
                rec[variant.label_bytes()..]
                    .iter()
                    .map(|&p| T::from_u8(p).expect("u8") * inv),
            );
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, 32, 32], data)?, labels, variant.classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut rec = vec![7u8];
        rec.extend((0..CIFAR_IMAGE_BYTES).map(|i| (i % 256) as u8));
        std::fs::write(&p, &rec).unwrap();
        let ds = load_cifar_binary::<f64>(&[p], CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.images.data()[1024], 0.0);
        assert_eq!(ds.images.data()[255], 1.0);
        assert_eq!(ds.images.data()[3], 3.0 / 255.0);
    }

    #[test]
    fn cifar100_keeps_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let mut bytes = Vec::new();
        for (coarse, fine) in [(3u8, 99u8), (19, 0)] {
            bytes.push(coarse);
            bytes.push(fine);
            bytes.extend(std::iter::repeat_n(128u8, CIFAR_IMAGE_BYTES));
        }
        std::fs::write(&p, &bytes).unwrap();
        let ds = load_cifar_binary::<f32>(&[p], CifarVariant::Cifar100).unwrap();
        assert_eq!(ds.labels, vec![99, 0]);
        assert!(ds.labels.iter().all(|&l| l < 100));
    }

    #[test]
    fn partial_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        std::fs::write(&p, vec![0u8; CIFAR_IMAGE_BYTES]).unwrap();
        assert!(matches!(
            load_cifar_binary::<f32>(&[p], CifarVariant::Cifar10),
            Err(Error::RecordSize { record: 3073, .. })
        ));
    }
}
