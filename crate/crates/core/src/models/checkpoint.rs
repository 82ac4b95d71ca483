//! Binary checkpoint format (all integers little-endian `u32`):
//!
//! ```text
//! "ARLB" | version | header-len | header JSON (input shape, layers, metadata)
//!        | tensor-count | { name-len | name | rank | dims... | f64 LE values }*
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Model, ModelMetadata, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ARLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    metadata: ModelMetadata,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the checkpoint's u32 fields")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        input_shape: model.input_shape.clone(),
        layers: model.layers.clone(),
        metadata: model.metadata.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, model.params.len())?;
    for p in &model.params {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub(crate) fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::MalformedCheckpoint(format!("header: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nlen = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")?;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::MalformedCheckpoint(format!("{name}: dims overflow")))?;
        let bytes = r.take(numel.checked_mul(8).ok_or(Error::Truncated("tensor values"))?, "tensor values")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(dims, data).map_err(|e| Error::MalformedCheckpoint(format!("{name}: {e}")))?;
        params.push(Param { name, value });
    }
    if r.pos != buf.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Model::from_parts(header.input_shape, header.layers, params, header.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_mlp, build_mnist_cnn};

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = build_mnist_cnn(11);
        m.metadata.method = "pat_entm".into();
        m.metadata.lambda = Some(2.0);
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.params().iter().zip(m.params()) {
            let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn cnn_checkpoint_has_eight_named_tensors() {
        let bytes = to_bytes(&build_mnist_cnn(0)).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[12 + hlen..16 + hlen].try_into().unwrap());
        assert_eq!(count, 8);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = to_bytes(&build_mlp(&[3, 2], 0).unwrap()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic(m)) if &m == b"XRLB"));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&build_mlp(&[3, 2], 0).unwrap()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn truncation_detected_everywhere() {
        let bytes = to_bytes(&build_mlp(&[3, 4, 2], 0).unwrap()).unwrap();
        for cut in [2, 6, 10, 20, bytes.len() - 1] {
            assert!(
                matches!(from_bytes(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn missing_file() {
        let err = load_checkpoint("/nonexistent/model.bin").unwrap_err();
        assert!(err.to_string().contains("checkpoint not found"));
    }
}
