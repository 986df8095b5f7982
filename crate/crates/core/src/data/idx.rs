use std::fs;
use std::path::Path;

use super::{read_maybe_gz, Dataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    let truncated = |expected: usize| Error::Truncated {
        path: path.into(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(need));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < need {
        return Err(truncated(need));
    }
    let shape: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = need + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    Ok(shape)
}

/// Reads an IDX image/label pair (optionally gzipped). Pixels are scaled to
/// `[0, 1]`; the class count is `max(label) + 1`, at least 10.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let ib = read_maybe_gz(images)?;
    let lb = read_maybe_gz(labels)?;
    let ishape = header(images, &ib, IMAGE_MAGIC, 3)?;
    let lshape = header(labels, &lb, LABEL_MAGIC, 1)?;
    let (n, h, w) = (ishape[0], ishape[1], ishape[2]);
    if n != lshape[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: lshape[0],
        });
    }
    let inv = T::one() / T::from_f64_lossy(255.0);
    let pixels = &ib[16..16 + n * h * w];
    let data: Vec<T> = pixels.iter().map(|&p| T::from_u8(p).expect("u8") * inv).collect();
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(Tensor::new(&[n, 1, h, w], data)?, labels, classes)
}

/// Writes an uncompressed IDX pair; used to build fixtures.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    labels: &[u8],
    height: usize,
    width: usize,
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * height * width {
        return Err(Error::dim("write_idx", "pixels", n * height * width, pixels.len()));
    }
    let mut ib = Vec::with_capacity(16 + pixels.len());
    ib.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [n, height, width] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    ib.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + n);
    lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(n as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    fs::write(images_path, ib).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lb).map_err(|e| Error::io(labels_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let (ip, lp) = (dir.join("img"), dir.join("lbl"));
        let pixels: Vec<u8> = (0..8).map(|i| (i * 36) as u8).collect();
        write_idx(&ip, &lp, &pixels, &[5, 0], 2, 2).unwrap();
        (ip, lp)
    }

    #[test]
    fn round_trip_two_images() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let ds = load_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![5, 0]);
        assert_eq!(ds.images.data()[1], 36.0 / 255.0);
        assert_eq!(ds.images.data()[7], 252.0 / 255.0);
    }

    #[test]
    fn gzip_is_transparent() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let gz = dir.path().join("img.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&fs::read(&ip).unwrap()).unwrap();
        fs::write(&gz, enc.finish().unwrap()).unwrap();
        let a = load_idx::<f32>(&ip, &lp).unwrap();
        let b = load_idx::<f32>(&gz, &lp).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        assert!(matches!(load_idx::<f32>(&lp, &lp), Err(Error::BadMagic { .. })));

        let bytes = fs::read(&ip).unwrap();
        let cut = dir.path().join("cut");
        fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        match load_idx::<f32>(&cut, &lp) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!((expected, actual), (24, 21));
            }
            other => panic!("{other:?}"),
        }

        let (ip3, lp3) = (dir.path().join("i3"), dir.path().join("l3"));
        write_idx(&ip3, &lp3, &[0; 12], &[1, 2, 3], 2, 2).unwrap();
        assert!(matches!(
            load_idx::<f32>(&ip, &lp3),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }
}
