//! The `HTP1` binary tensor format and the checkpoint container built on it.
//!
//! Layout of one tensor: the magic bytes `HTP1`, a little-endian `u32` rank,
//! `rank` little-endian `u64` dimensions, then the row-major payload as
//! little-endian `f64`.
//!
//! A checkpoint is the magic `HTPC`, a little-endian `u64` manifest length,
//! a JSON manifest, and the concatenated `HTP1` blobs the manifest points at.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HtpError, Result};
use crate::tensor::{Mat, Ten3};

pub const TENSOR_MAGIC: &[u8; 4] = b"HTP1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HTPC";

/// A rank-n array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(HtpError::shape("Tensor::new", format!("{dims:?}"), format!("{} values", data.len())));
        }
        Ok(Tensor { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse one tensor; returns it with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != TENSOR_MAGIC {
            return Err(HtpError::Format("missing HTP1 magic".into()));
        }
        let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| HtpError::Format(format!("dimension {d} too large")))?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| HtpError::Format("element count overflows".into()))?;
        let payload = cur.take(count.checked_mul(8).ok_or_else(|| HtpError::Format("payload too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Tensor { dims, data }, cur.pos))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()).map_err(|e| HtpError::io_at(path.as_ref(), e))?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| HtpError::io_at(path.as_ref(), e))?;
        let (t, used) = Tensor::from_bytes(&bytes)?;
        if used != bytes.len() {
            return Err(HtpError::Format(format!("{} trailing bytes after tensor", bytes.len() - used)));
        }
        Ok(t)
    }

    pub fn into_mat(self) -> Result<Mat> {
        match self.dims.as_slice() {
            [r, c] => Mat::new(*r, *c, self.data),
            other => Err(HtpError::Format(format!("expected rank-2 tensor, got dims {other:?}"))),
        }
    }

    pub fn into_ten3(self) -> Result<Ten3> {
        match self.dims.as_slice() {
            [a, b, c] => Ten3::new(*a, *b, *c, self.data),
            other => Err(HtpError::Format(format!("expected rank-3 tensor, got dims {other:?}"))),
        }
    }
}

impl From<&Mat> for Tensor {
    fn from(m: &Mat) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

impl From<&Ten3> for Tensor {
    fn from(t: &Ten3) -> Self {
        let (a, b, c) = t.shape();
        Tensor {
            dims: vec![a, b, c],
            data: t.data().to_vec(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(HtpError::Format(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    offset: u64,
    length: u64,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    tensors: BTreeMap<String, ManifestEntry>,
}

/// Serialize named tensors into one checkpoint blob.
pub fn write_checkpoint(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        let bytes = t.to_bytes();
        entries.insert(
            name.clone(),
            ManifestEntry {
                offset: payload.len() as u64,
                length: bytes.len() as u64,
                dims: t.dims.clone(),
            },
        );
        payload.extend_from_slice(&bytes);
    }
    let manifest = serde_json::to_vec(&Manifest {
        format: "HTP1".into(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(HtpError::Format("missing HTPC magic".into()));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(cur.take(len)?)?;
    if manifest.format != "HTP1" {
        return Err(HtpError::Format(format!("unsupported tensor format {}", manifest.format)));
    }
    let payload = &bytes[cur.pos..];
    let mut out = BTreeMap::new();
    for (name, e) in manifest.tensors {
        let start = e.offset as usize;
        let end = start
            .checked_add(e.length as usize)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| HtpError::Format(format!("entry `{name}` points outside the payload")))?;
        let (t, used) = Tensor::from_bytes(&payload[start..end])?;
        if used != end - start || t.dims != e.dims {
            return Err(HtpError::Format(format!("entry `{name}` does not match its manifest record")));
        }
        out.insert(name, t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"HTP1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes();
        assert!(Tensor::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Tensor::from_bytes(&bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = BTreeMap::new();
        m.insert("a.weight".to_string(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        m.insert("b".to_string(), Tensor::new(vec![3], vec![0.1, f64::MIN_POSITIVE, -7.0]).unwrap());
        let blob = write_checkpoint(&m).unwrap();
        assert_eq!(read_checkpoint(&blob).unwrap(), m);
        assert!(read_checkpoint(&blob[..blob.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) & !(0x7ffu64 << 52) | (0x3ffu64 << 52))).collect();
            let t = Tensor::new(dims, data).unwrap();
            let (back, used) = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(used, t.to_bytes().len());
            prop_assert!(back.dims == t.dims);
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
