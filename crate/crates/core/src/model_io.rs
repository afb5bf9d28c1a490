//! Weight storage, half-precision quantization and the `TSSD` model file.
//!
//! File layout (all integers little-endian, no padding):
//!
//! ```text
//! magic    b"TSSD"
//! version  u32 (= 1)
//! count    u32             number of blob records
//! record*  name_len u32 | name (UTF-8) | dtype u8 (0 = f32, 1 = f16)
//!          | rank u32 | extents u32 * rank | payload (elements * dtype size)
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use half::f16;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{ArchSpec, BlobSpec};

pub const MODEL_MAGIC: &[u8; 4] = b"TSSD";
pub const MODEL_VERSION: u32 = 1;
/// Largest finite binary16 magnitude.
pub const F16_MAX: f32 = 65504.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            _ => None,
        }
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            other => Err(Error::Config(format!(
                "unknown dtype `{other}` (expected f16 or f32)"
            ))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameter blobs in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    blobs: IndexMap<String, Blob>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero blobs for every entry of a manifest.
    pub fn zeros(manifest: &[BlobSpec]) -> Self {
        let mut store = WeightStore::new();
        for b in manifest {
            store.blobs.insert(
                b.name.clone(),
                Blob {
                    shape: b.shape.clone(),
                    data: vec![0.0; b.len()],
                },
            );
        }
        store
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::BlobShape {
                name,
                expected: shape,
                found: vec![data.len()],
            });
        }
        self.blobs.insert(name, Blob { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .get(name)
            .ok_or_else(|| Error::MissingBlob(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Blob> {
        self.blobs
            .get_mut(name)
            .ok_or_else(|| Error::MissingBlob(name.to_string()))
    }

    pub fn data(&self, name: &str) -> Result<&[f32]> {
        self.get(name).map(|b| b.data.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Blob)> {
        self.blobs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    /// Total number of stored scalars.
    pub fn element_count(&self) -> usize {
        self.blobs.values().map(|b| b.data.len()).sum()
    }

    /// Checks that names, order and shapes match the manifest exactly.
    pub fn check_manifest(&self, manifest: &[BlobSpec]) -> Result<()> {
        for expected in manifest {
            let blob = self.get(&expected.name)?;
            if blob.shape != expected.shape {
                return Err(Error::BlobShape {
                    name: expected.name.clone(),
                    expected: expected.shape.clone(),
                    found: blob.shape.clone(),
                });
            }
        }
        if self.len() != manifest.len() {
            let extra = self
                .blobs
                .keys()
                .find(|k| !manifest.iter().any(|m| &m.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Config(format!(
                "store has {} blobs, architecture needs {} (unexpected `{extra}`)",
                self.len(),
                manifest.len()
            )));
        }
        if !self.blobs.keys().zip(manifest).all(|(k, m)| *k == m.name) {
            return Err(Error::Config(
                "blob order differs from the architecture".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantStats {
    /// Values outside the binary16 range that were clamped to +-65504.
    pub clamped: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
}

/// Rounds one value to binary16 (nearest-even, subnormals kept, overflow clamped) and widens it back.
pub fn round_f16(v: f32) -> f32 {
    f16::from_f32(v.clamp(-F16_MAX, F16_MAX)).to_f32()
}

/// Returns the dequantized store: every value replaced by its binary16 neighbour.
pub fn quantize_fp16(store: &WeightStore) -> (WeightStore, QuantStats) {
    let mut stats = QuantStats::default();
    let mut total = 0usize;
    let mut err_sum = 0.0f64;
    let mut out = store.clone();
    for blob in out.blobs.values_mut() {
        for v in blob.data.iter_mut() {
            if v.abs() > F16_MAX {
                stats.clamped += 1;
            }
            let q = round_f16(*v);
            let err = (q as f64 - *v as f64).abs();
            if err.is_finite() {
                stats.max_abs_error = stats.max_abs_error.max(err);
                err_sum += err;
            }
            total += 1;
            *v = q;
        }
    }
    if total > 0 {
        stats.mean_abs_error = err_sum / total as f64;
    }
    (out, stats)
}

/// Seeded He-style initialisation: weights ~ N(0, 2 / fan_in), zero biases.
pub fn init_random(spec: &ArchSpec, seed: u64) -> Result<WeightStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for blob in spec.parameter_manifest()? {
        let data = if blob.shape.len() == 4 {
            let fan_in = (blob.shape[1] * blob.shape[2] * blob.shape[3]) as f64;
            let scale = (2.0 / fan_in).sqrt();
            (0..blob.len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * scale) as f32
                })
                .collect()
        } else {
            vec![0.0; blob.len()]
        };
        store.insert(blob.name, blob.shape, data)?;
    }
    Ok(store)
}

fn header_len() -> usize {
    4 + 4 + 4
}

fn record_header_len(name: &str, rank: usize) -> usize {
    4 + name.len() + 1 + 4 + 4 * rank
}

/// Exact file size a manifest serializes to.
pub fn encoded_len(manifest: &[BlobSpec], dtype: Dtype) -> usize {
    header_len()
        + manifest
            .iter()
            .map(|b| record_header_len(&b.name, b.shape.len()) + b.len() * dtype.size())
            .sum::<usize>()
}

/// Bytes of framing (everything except payload) for a manifest.
pub fn framing_len(manifest: &[BlobSpec]) -> usize {
    header_len()
        + manifest
            .iter()
            .map(|b| record_header_len(&b.name, b.shape.len()))
            .sum::<usize>()
}

pub fn encode(store: &WeightStore, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, blob) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.tag());
        out.extend_from_slice(&(blob.shape.len() as u32).to_le_bytes());
        for &d in &blob.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => {
                for v in &blob.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for v in &blob.data {
                    out.extend_from_slice(&f16::from_f32(v.clamp(-F16_MAX, F16_MAX)).to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos, format!("truncated {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, not a TSSD model file"));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("blob count")?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let record_start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "blob name")?)
            .map_err(|_| Error::format(name_at, "blob name is not UTF-8"))?
            .to_string();
        if store.blobs.contains_key(&name) {
            return Err(Error::format(
                record_start,
                format!("duplicate blob `{name}`"),
            ));
        }
        let tag_at = r.pos;
        let tag = r.u8("dtype")?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::format(tag_at, format!("unknown dtype tag {tag}")))?;
        let rank_at = r.pos;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(rank_at, format!("rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let payload_at = r.pos;
        let bytes_len = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(payload_at, "extents overflow"))?;
        let payload = r.take(bytes_len, &format!("payload of `{name}`"))?;
        let data = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F16 => payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
        };
        store.blobs.insert(name, Blob { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after last record"));
    }
    Ok(store)
}

pub fn save(store: &WeightStore, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    fs::write(path, encode(store, dtype))?;
    Ok(())
}

/// Reads a model file, optionally checking it against an architecture's manifest.
pub fn load(path: impl AsRef<Path>, manifest: Option<&[BlobSpec]>) -> Result<WeightStore> {
    let store = decode(&fs::read(path)?)?;
    if let Some(m) = manifest {
        store.check_manifest(m)?;
    }
    Ok(store)
}
