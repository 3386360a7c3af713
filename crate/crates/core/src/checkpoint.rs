//! Binary checkpoint container.
//!
//! Layout: the magic `MMDGCKPT`, a version byte, the TOML config snapshot
//! (u64 length + UTF-8), the step and epoch counters (u64 each), then a
//! u64 entry count followed by entries of: u64 name length, name, u64 rank,
//! rank × u64 dims, and the little-endian f64 payload. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use mmdg_autodiff::Tensor;

use crate::error::{io_err, MmdgError, Result};

pub const MAGIC: &[u8; 8] = b"MMDGCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub step: u64,
    pub epoch: u64,
    /// Named tensors in write order.
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| MmdgError::Checkpoint(format!("missing entry {name}")))
    }

    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.entries
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let u = |b: &mut Vec<u8>, v: u64| b.extend_from_slice(&v.to_le_bytes());
        b.extend_from_slice(MAGIC);
        b.push(VERSION);
        u(&mut b, self.config_toml.len() as u64);
        b.extend_from_slice(self.config_toml.as_bytes());
        u(&mut b, self.step);
        u(&mut b, self.epoch);
        u(&mut b, self.entries.len() as u64);
        for (name, t) in &self.entries {
            u(&mut b, name.len() as u64);
            b.extend_from_slice(name.as_bytes());
            u(&mut b, t.shape().len() as u64);
            for &d in t.shape() {
                u(&mut b, d as u64);
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(MmdgError::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(MmdgError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let config_toml = r.string()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let n = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u64()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len =
                len.ok_or_else(|| MmdgError::Checkpoint(format!("entry {name} is too large")))?;
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| MmdgError::Checkpoint("overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| MmdgError::Checkpoint(format!("entry {name}: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(MmdgError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config_toml,
            step,
            epoch,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(MmdgError::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MmdgError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| MmdgError::Checkpoint("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_toml: "seed = 1\n".into(),
            step: 7,
            epoch: 2,
            entries: vec![
                (
                    "a".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
                ),
                ("b.c".into(), Tensor::scalar(0.1)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.step, 7);
        for ((n1, t1), (n2, t2)) in c.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
