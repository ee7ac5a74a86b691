//! Binary model files.
//!
//! Layout, all integers `u64` and all reals IEEE-754 `f64`, little-endian:
//!
//! ```text
//! "LATEM1"                      6-byte magic
//! d_x, d_y, K                   u64 each
//! mean[d_x], std[d_x]           normalization statistics
//! W_1 .. W_K                    each d_x*d_y values, row-major
//! meta_len                      u64
//! metadata                      meta_len bytes of UTF-8 JSON
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{LatentModel, ModelMeta};

pub const MAGIC: &[u8; 6] = b"LATEM1";

pub fn model_to_bytes(model: &LatentModel) -> Vec<u8> {
    let (d_x, d_y, k) = (model.dim_x(), model.dim_y(), model.k());
    let meta = serde_json::to_vec(&model.meta).expect("metadata is always serializable");
    let mut out = Vec::with_capacity(6 + 32 + 8 * (2 * d_x + k * d_x * d_y) + meta.len());
    out.extend_from_slice(MAGIC);
    for v in [d_x, d_y, k] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let reals = model
        .norm_stats
        .mean
        .iter()
        .chain(&model.norm_stats.std)
        .chain(model.matrices().iter().flat_map(|w| w.iter()));
    for v in reals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated while reading {what}")))?;
        let bytes = &self.buf[self.pos..end];
        self.pos = end;
        Ok(bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Corrupt(format!("size overflow in {what}")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<LatentModel> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return match bytes.get(..MAGIC.len()) {
            Some(head) if head.starts_with(b"LATEM") => Err(Error::UnsupportedVersion(
                String::from_utf8_lossy(head).into_owned(),
            )),
            _ => Err(Error::BadMagic),
        };
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let dim = |v: u64, what: &str| -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Corrupt(format!("invalid {what} {v}")))
    };
    let d_x = dim(r.u64("d_x")?, "d_x")?;
    let d_y = dim(r.u64("d_y")?, "d_y")?;
    let k = dim(r.u64("K")?, "K")?;
    let mean = Array1::from(r.reals(d_x, "mean")?);
    let std = Array1::from(r.reals(d_x, "std")?);
    let cells = d_x
        .checked_mul(d_y)
        .ok_or_else(|| Error::Corrupt("matrix size overflow".into()))?;
    let matrices = (0..k)
        .map(|_| {
            let v = r.reals(cells, "matrices")?;
            Ok(Array2::from_shape_vec((d_x, d_y), v).expect("length checked"))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta_len = usize::try_from(r.u64("metadata length")?)
        .map_err(|_| Error::Corrupt("metadata length".into()))?;
    let meta_bytes = r.take(meta_len, "metadata")?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "size mismatch: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let meta: ModelMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    if meta.support_counts.len() != k || meta.matrix_origin.len() != k {
        return Err(Error::Corrupt("metadata does not match K".into()));
    }
    LatentModel::new(matrices, NormStats { mean, std }, meta)
}

/// Write via a temporary sibling file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_model(path: &Path, model: &LatentModel) -> Result<()> {
    write_atomic(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<LatentModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PruneEvent;
    use crate::trainer::init_model;
    use proptest::prelude::*;

    fn sample() -> LatentModel {
        let mut m = init_model(3, 2, 2, 7).unwrap();
        m.norm_stats.mean[1] = -0.25;
        m.norm_stats.std[2] = 3.5;
        m.meta.eta = 0.1;
        m.meta.train_classes = vec!["a".into(), "b".into()];
        m.meta.prune_history.push(PruneEvent {
            epoch: 5,
            candidates: vec![0, 1, 2],
            counts: vec![10, 0, 4],
            threshold: 0.7,
            kept: vec![0, 2],
        });
        m.meta.settings.insert("k".into(), "2".into());
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample();
        let bytes = model_to_bytes(&m);
        assert_eq!(&bytes[..6], b"LATEM1");
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = model_to_bytes(&sample());
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        assert!(matches!(model_from_bytes(&bytes[..40]), Err(Error::Corrupt(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(model_from_bytes(&extra), Err(Error::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[5] = b'2';
        let err = model_from_bytes(&v2).unwrap_err();
        assert!(err.to_string().contains("unsupported version"));
        let mut bad = bytes;
        bad[0] = b'X';
        assert_eq!(model_from_bytes(&bad).unwrap_err().to_string(), "not a LATEM1 file");
        assert!(matches!(model_from_bytes(b""), Err(Error::BadMagic)));
    }

    proptest! {
        #[test]
        fn bits_survive(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 12)) {
            let w = Array2::from_shape_vec((3, 2), vals[..6].to_vec()).unwrap();
            let w2 = Array2::from_shape_vec((3, 2), vals[6..].to_vec()).unwrap();
            let m = LatentModel::new(vec![w, w2], NormStats::identity(3), ModelMeta::new(2)).unwrap();
            let back = model_from_bytes(&model_to_bytes(&m)).unwrap();
            for (a, b) in m.matrices().iter().zip(back.matrices()) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
