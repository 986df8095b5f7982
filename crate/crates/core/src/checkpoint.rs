//! Binary coreset checkpoints.
//!
//! Layout: `RFADCKPT`, a little-endian `u32` version, a `u64` header length,
//! a JSON header, then little-endian `f64` buffers in a fixed order:
//! base images, transform, labels, mask (0/1), frozen values, `log τ`, and
//! the pixel map mean and matrix when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ZcaTransform;
use crate::distill::Coreset;
use crate::error::{Error, Result};
use crate::krr::PlattHead;
use crate::networks::NetworkSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RFADCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: NetworkSpec,
    pub config_hash: String,
    pub image_shape: Vec<usize>,
    pub num_classes: usize,
    pub class_of: Vec<usize>,
    pub source_indices: Vec<usize>,
    pub frozen: usize,
    pub pixel_map: bool,
    pub pixel_map_lambda: f64,
}

fn put<T: Scalar>(out: &mut Vec<u8>, values: impl IntoIterator<Item = T>) {
    for v in values {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
}

pub fn to_bytes<T: Scalar>(coreset: &Coreset<T>, config_hash: &str) -> Vec<u8> {
    let header = CheckpointHeader {
        spec: coreset.spec.clone(),
        config_hash: config_hash.to_string(),
        image_shape: coreset.base_images.shape().to_vec(),
        num_classes: coreset.num_classes,
        class_of: coreset.class_of.clone(),
        source_indices: coreset.source_indices.clone(),
        frozen: coreset.frozen_values.len(),
        pixel_map: coreset.pixel_map.is_some(),
        pixel_map_lambda: coreset.pixel_map.as_ref().map_or(0.0, |z| z.lambda),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put(&mut out, coreset.base_images.data().iter().copied());
    put(&mut out, coreset.transform.data().iter().copied());
    put(&mut out, coreset.labels.data().iter().copied());
    put(&mut out, coreset.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    put(&mut out, coreset.frozen_values.iter().copied());
    put(&mut out, [coreset.platt.log_tau]);
    if let Some(z) = &coreset.pixel_map {
        put(&mut out, z.mean.iter().copied());
        put(&mut out, z.w.iter().copied());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated: need {end} bytes, have {}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        Ok(self.f64s(n)?.into_iter().map(T::from_f64_lossy).collect())
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Coreset<T>, CheckpointHeader)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a coreset checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let s = header.image_shape[0];
    let d: usize = header.image_shape[1..].iter().product();
    let classes = header.num_classes;

    let base_images = Tensor::new(&header.image_shape, r.scalars(s * d)?)?;
    let transform = Tensor::new(&[d, d], r.scalars(d * d)?)?;
    let labels = Tensor::new(&[s, classes], r.scalars(s * classes)?)?;
    let mask: Vec<bool> = r.f64s(s * d)?.into_iter().map(|v| v != 0.0).collect();
    let frozen_values = r.scalars(header.frozen)?;
    let log_tau = r.f64s(1)?[0];
    let pixel_map = if header.pixel_map {
        Some(ZcaTransform {
            mean: r.f64s(d)?,
            w: r.f64s(d * d)?,
            dim: d,
            lambda: header.pixel_map_lambda,
        })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let coreset = Coreset {
        base_images,
        transform,
        labels,
        mask,
        frozen_values,
        platt: PlattHead { log_tau },
        class_of: header.class_of.clone(),
        source_indices: header.source_indices.clone(),
        num_classes: classes,
        spec: header.spec.clone(),
        pixel_map,
    };
    Ok((coreset, header))
}

pub fn save<T: Scalar>(path: &Path, coreset: &Coreset<T>, config_hash: &str) -> Result<()> {
    fs::write(path, to_bytes(coreset, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Coreset<T>, CheckpointHeader)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
