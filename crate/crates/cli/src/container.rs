//! Binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ADPM" | version: u8 = 1 | count: u32
//! count x { name_len: u16 | name: utf-8 | rank: u8 | dims: rank x u32 | offset: u64 | bytes: u64 }
//! payload: f32 values, row-major; `offset` is relative to the payload start
//! ```
//!
//! Entries must lie inside the payload, must not overlap, and must hold
//! exactly `4 * product(dims)` bytes.

use std::path::Path;

use diabnet::nn::ParamStore;
use diabnet::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"ADPM";
pub const VERSION: u8 = 1;

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightContainer {
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

impl WeightContainer {
    pub fn from_params(params: &ParamStore) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Entries with contiguous offsets in tensor order.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let bytes = 4 * t.len() as u64;
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        for e in &manifest {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.bytes.to_le_bytes());
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates `bytes`; `Err` holds a description of the defect.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic bytes (not a weight container)".into());
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(format!("unsupported container version {version}"));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "tensor name is not utf-8".to_string())?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64()?;
            let bytes = r.u64()?;
            manifest.push(ManifestEntry {
                name,
                shape,
                offset,
                bytes,
            });
        }
        let payload = &bytes[r.pos..];
        validate_manifest(&manifest, payload.len() as u64)?;
        let tensors = manifest
            .into_iter()
            .map(|e| {
                let raw = &payload[e.offset as usize..(e.offset + e.bytes) as usize];
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                Tensor::new(e.shape.clone(), data)
                    .map(|t| (e.name, t))
                    .map_err(|err| err.to_string())
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| CliError::Format {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Copies every tensor into `params`, which must have exactly the same
    /// names and shapes in the same order.
    pub fn restore_into(&self, params: &mut ParamStore) -> std::result::Result<(), String> {
        let expected: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t.shape()))
            .collect();
        if expected != found {
            let first = expected
                .iter()
                .zip(&found)
                .position(|(a, b)| a != b)
                .unwrap_or(expected.len().min(found.len()));
            return Err(format!(
                "manifest does not match the configured model: {} tensors expected, {} stored; first difference at entry {first}: expected {:?}, stored {:?}",
                expected.len(),
                found.len(),
                expected.get(first),
                found.get(first),
            ));
        }
        for (name, t) in &self.tensors {
            params.set(name, t.clone()).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn validate_manifest(
    manifest: &[ManifestEntry],
    payload_len: u64,
) -> std::result::Result<(), String> {
    let mut spans = Vec::with_capacity(manifest.len());
    for e in manifest {
        let elements = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| format!("{}: shape {:?} overflows", e.name, e.shape))?;
        if e.bytes != 4 * elements {
            return Err(format!(
                "{}: {} bytes stored for shape {:?}",
                e.name, e.bytes, e.shape
            ));
        }
        let end = e
            .offset
            .checked_add(e.bytes)
            .filter(|&end| end <= payload_len);
        let Some(end) = end else {
            return Err(format!(
                "{}: bytes {}+{} exceed the {payload_len}-byte payload",
                e.name, e.offset, e.bytes
            ));
        };
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(format!("{} and {} overlap", w[0].2, w[1].2));
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated header at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightContainer {
        WeightContainer {
            tensors: vec![
                (
                    "a.w".into(),
                    Tensor::new([2, 3], vec![0.1, -2.0, 3.5, 1e-8, 0.0, 7.25]).unwrap(),
                ),
                ("a.b".into(), Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap()),
                ("s".into(), Tensor::scalar(0.3)),
            ],
        }
    }

    #[test]
    fn round_trip_preserves_shapes_and_f32_values() {
        let c = sample();
        let back = WeightContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.tensors.len(), 3);
        for ((n0, t0), (n1, t1)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn header_defects_rejected() {
        let good = sample().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(WeightContainer::from_bytes(&bad)
            .unwrap_err()
            .contains("magic"));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(WeightContainer::from_bytes(&bad).is_err());
        assert!(WeightContainer::from_bytes(&good[..good.len() - 1]).is_err());
        assert!(WeightContainer::from_bytes(&good[..7]).is_err());
    }

    #[test]
    fn overlapping_and_out_of_bounds_entries_rejected() {
        let entry = |name: &str, offset, bytes| ManifestEntry {
            name: name.into(),
            shape: vec![2],
            offset,
            bytes,
        };
        assert!(validate_manifest(&[entry("a", 0, 8), entry("b", 8, 8)], 16).is_ok());
        assert!(validate_manifest(&[entry("a", 0, 8), entry("b", 4, 8)], 16)
            .unwrap_err()
            .contains("overlap"));
        assert!(validate_manifest(&[entry("a", 12, 8)], 16).is_err());
        assert!(validate_manifest(&[entry("a", 0, 12)], 16).is_err());
        assert!(validate_manifest(&[entry("a", u64::MAX, 8)], 16).is_err());
    }

    #[test]
    fn restore_requires_identical_manifest() {
        let c = sample();
        let mut params = ParamStore::new();
        for (n, t) in &c.tensors {
            params.add(n.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        c.restore_into(&mut params).unwrap();
        assert_eq!(params.values()[0].data()[2], 3.5);

        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros([3, 2]));
        assert!(c.restore_into(&mut wrong).is_err());
    }
}
