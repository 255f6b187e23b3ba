//! Binary checkpoint format: magic `FQRC`, `u32` version, `u32` tensor count,
//! then per tensor a `u32`-length-prefixed UTF-8 name, `u8` rank, `u64` dims
//! and `f64` payload, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Array;

pub const MAGIC: &[u8; 4] = b"FQRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, a) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.rank() as u8);
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(MAGIC),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version: expected {CHECKPOINT_VERSION}, found {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
            let Some(n) = n else {
                return Err(Error::Checkpoint(format!("truncated payload for {name} {shape:?}")));
            };
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let a = Array::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, a));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
