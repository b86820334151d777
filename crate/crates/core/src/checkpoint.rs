//! Binary checkpoint format.
//!
//! ```text
//! "QINT"                      magic
//! u32                         format version
//! u64                         global step
//! u32 + bytes                 RNG state
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               name (UTF-8)
//!   u32                       rank
//!   u32 × rank                dims
//!   f64 × Π dims              values
//! u32                         CRC-32 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{CheckpointError, Error, Result};
use crate::net::NetworkGraph;

pub const MAGIC: [u8; 4] = *b"QINT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub global_step: u64,
    pub rng_state: Vec<u8>,
    pub tensors: Vec<NamedTensor>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(format!("reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let small = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| Error::Argument(format!("{what} {n} does not fit in 32 bits")))
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        put_u32(&mut buf, VERSION);
        buf.extend_from_slice(&self.global_step.to_le_bytes());
        put_u32(&mut buf, small(self.rng_state.len(), "rng state length")?);
        buf.extend_from_slice(&self.rng_state);
        put_u32(&mut buf, small(self.tensors.len(), "tensor count")?);
        for t in &self.tensors {
            let expected: usize = t.dims.iter().product();
            if expected != t.values.len() {
                return Err(Error::Argument(format!(
                    "tensor {} has {} values but dims {:?}",
                    t.name,
                    t.values.len(),
                    t.dims
                )));
            }
            put_u32(&mut buf, small(t.name.len(), "name length")?);
            buf.extend_from_slice(t.name.as_bytes());
            put_u32(&mut buf, small(t.dims.len(), "rank")?);
            for &d in &t.dims {
                put_u32(&mut buf, small(d, "dimension")?);
            }
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated(format!("{} bytes is shorter than the magic", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        // magic + version + step + rng len + tensor count + crc
        if bytes.len() < 4 + 4 + 8 + 4 + 4 + 4 {
            return Err(CheckpointError::Truncated(format!("{} bytes is shorter than the fixed header", bytes.len())));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }
        let mut r = Reader { bytes: payload, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnknownVersion { found: version, expected: VERSION });
        }
        let global_step = r.u64("global step")?;
        let rng_len = r.u32("rng state length")? as usize;
        let rng_state = r.take(rng_len, "rng state")?.to_vec();
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("tensor too large".into()))?, "values")?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        if r.pos != payload.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        Ok(Checkpoint { global_step, rng_state, tensors })
    }

    pub fn from_network(net: &NetworkGraph, global_step: u64, rng: &ChaCha8Rng) -> Self {
        let tensors = net
            .tensors()
            .into_iter()
            .map(|(name, dims, values)| NamedTensor { name, dims, values: values.to_vec() })
            .collect();
        Checkpoint { global_step, rng_state: rng_state_bytes(rng), tensors }
    }

    pub fn network(&self) -> Result<NetworkGraph> {
        let ts: Vec<(String, Vec<usize>, Vec<f64>)> =
            self.tensors.iter().map(|t| (t.name.clone(), t.dims.clone(), t.values.clone())).collect();
        NetworkGraph::from_tensors(&ts)
    }

    pub fn rng(&self) -> Result<ChaCha8Rng> {
        rng_from_bytes(&self.rng_state)
    }
}

/// ChaCha state as 32 seed bytes, a u64 stream id and a u128 word position.
pub fn rng_state_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn rng_from_bytes(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 56 {
        return Err(CheckpointError::Malformed(format!("rng state has {} bytes, expected 56", bytes.len())).into());
    }
    let mut rng = ChaCha8Rng::from_seed(bytes[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(bytes[40..56].try_into().unwrap()));
    Ok(rng)
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}
