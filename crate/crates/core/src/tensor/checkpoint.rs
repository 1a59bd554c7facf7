//! Binary parameter checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"RFPCKPT\0"
//! 8       4     u32 format version (currently 1)
//! 12      32    architecture hash (SHA-256, raw bytes)
//! 44      8     u64 optimizer step count
//! 52      4     u32 config length L
//! 56      L     resolved experiment config, UTF-8 TOML
//! 56+L    4     u32 entry count E
//! then E entries:
//!         4     u32 name length M
//!         M     parameter path, UTF-8 (e.g. "rfp.p3.weight")
//!         1     u8 kind: 0 = parameter value, 1 = momentum buffer
//!         4     u32 rank R (0..=4)
//!         8·R   u64 dims
//!         8·n   f64 values, n = product of dims
//! ```

use std::fs;
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Value,
    Momentum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: [u8; 32],
    pub step: u64,
    pub config: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, config: String, arch_hash: [u8; 32], step: u64) -> Self {
        let mut entries = Vec::new();
        for (_, p) in store.iter() {
            entries.push(CheckpointEntry {
                name: p.name.clone(),
                kind: EntryKind::Value,
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.to_f64_vec(),
            });
            if let Some(v) = &p.velocity {
                entries.push(CheckpointEntry {
                    name: p.name.clone(),
                    kind: EntryKind::Momentum,
                    shape: v.shape().to_vec(),
                    values: v.to_f64_vec(),
                });
            }
        }
        Checkpoint {
            arch_hash,
            step,
            config,
            entries,
        }
    }

    /// Overwrite the values (and momentum buffers) in `store` from this checkpoint.
    /// Every parameter in the store must be present with a matching shape.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut seen = vec![false; store.len()];
        for e in &self.entries {
            let id = store
                .id(&e.name)
                .ok_or_else(|| Error::contract(format!("checkpoint has unknown parameter `{}`", e.name)))?;
            let p = store.get_mut(id);
            if p.tensor.shape() != e.shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    e.shape,
                    p.tensor.shape()
                )));
            }
            let t = Tensor::from_f64(&e.shape, &e.values)?;
            match e.kind {
                EntryKind::Value => {
                    p.tensor = t;
                    seen[id.index()] = true;
                }
                EntryKind::Momentum => p.velocity = Some(t),
            }
        }
        if let Some((_, p)) = store.iter().find(|(id, _)| !seen[id.index()]) {
            return Err(Error::contract(format!("checkpoint is missing parameter `{}`", p.name)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.kind {
                EntryKind::Value => 0,
                EntryKind::Momentum => 1,
            });
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::contract("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let arch_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let clen = r.u32()? as usize;
        let config = r.string(clen)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = r.string(nlen)?;
            let kind = match r.take(1)?[0] {
                0 => EntryKind::Value,
                1 => EntryKind::Momentum,
                k => return Err(Error::contract(format!("entry `{name}` has unknown kind {k}"))),
            };
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(Error::contract(format!("entry `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push(CheckpointEntry {
                name,
                kind,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::contract(format!(
                "{} trailing bytes after checkpoint entries",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            arch_hash,
            step,
            config,
            entries,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::contract(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::contract("checkpoint string is not UTF-8"))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("a.weight", Tensor::from_f64(&[2, 1, 1, 1], &[0.5, -1.25]).unwrap())
            .unwrap();
        let b = store
            .insert("a.bias", Tensor::from_f64(&[2], &[3.0, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        store.get_mut(b).velocity = Some(Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
        Checkpoint::from_store(&store, "x = 1\n".into(), [7; 32], 42)
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(&bytes[12..44], &[7; 32]);
        assert_eq!(u64::from_le_bytes(bytes[44..52].try_into().unwrap()), 42);
        assert_eq!(u32::from_le_bytes(bytes[52..56].try_into().unwrap()), 6);
        assert_eq!(&bytes[56..62], b"x = 1\n");
        assert_eq!(u32::from_le_bytes(bytes[62..66].try_into().unwrap()), 3);
    }

    #[test]
    fn bytes_round_trip_and_load() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);

        let mut store = ParamStore::<f64>::new();
        store.insert("a.weight", Tensor::zeros(&[2, 1, 1, 1])).unwrap();
        store.insert("a.bias", Tensor::zeros(&[2])).unwrap();
        back.load_into(&mut store).unwrap();
        assert_eq!(store.by_name("a.weight").unwrap().tensor.data(), &[0.5, -1.25]);
        assert_eq!(
            store.by_name("a.bias").unwrap().velocity.as_ref().unwrap().data(),
            &[0.1, 0.2]
        );
    }

    #[test]
    fn truncated_and_mismatched_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());

        let mut store = ParamStore::<f64>::new();
        store.insert("a.weight", Tensor::zeros(&[1, 2, 1, 1])).unwrap();
        store.insert("a.bias", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(sample().load_into(&mut store), Err(Error::Contract(_))));
    }
}
