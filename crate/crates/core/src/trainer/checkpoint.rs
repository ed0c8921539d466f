//! Binary checkpoint container.
//!
//! Layout (little-endian): `"ECGM"`, version `u32`, config digest `[u8; 32]`,
//! state blob (`u32` length + bytes), tensor count `u32`, then per tensor a
//! `u16`-prefixed UTF-8 name, flags `u8`, rank `u8`, dims `u32[rank]` and the
//! `f64` payload. A SHA-256 of everything before it closes the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"ECGM";
pub const VERSION: u32 = 1;

const FLAG_TRAINABLE: u8 = 1;
const FLAG_OPTIMIZER: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    /// Optimizer state rather than a model parameter.
    pub optimizer: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub state: Vec<u8>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, optimizer: &[(String, Tensor)], state: Vec<u8>, config_digest: [u8; 32]) -> Self {
        let mut tensors: Vec<NamedTensor> = store
            .iter()
            .map(|(_, name, value, trainable)| NamedTensor { name: name.to_string(), trainable, optimizer: false, value: value.clone() })
            .collect();
        tensors.extend(optimizer.iter().map(|(name, value)| NamedTensor {
            name: name.clone(),
            trainable: false,
            optimizer: true,
            value: value.clone(),
        }));
        Self { config_digest, state, tensors }
    }

    /// Model parameters in file order, with their trainable flags.
    pub fn store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for t in self.tensors.iter().filter(|t| !t.optimizer) {
            store.add(t.name.clone(), t.value.clone(), t.trainable)?;
        }
        Ok(store)
    }

    pub fn optimizer_tensors(&self) -> Vec<(String, Tensor)> {
        self.tensors.iter().filter(|t| t.optimizer).map(|t| (t.name.clone(), t.value.clone())).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&u32_len(self.state.len(), "state blob")?.to_le_bytes());
        out.extend_from_slice(&self.state);
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name {} is too long", t.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(if t.trainable { FLAG_TRAINABLE } else { 0 } | if t.optimizer { FLAG_OPTIMIZER } else { 0 });
            let rank = u8::try_from(t.value.rank()).map_err(|_| Error::Checkpoint(format!("tensor {} has too many dims", t.name)))?;
            out.push(rank);
            for &d in t.value.shape() {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        if bytes.len() < 8 + 32 + 32 {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != tail {
            return Err(Error::Integrity("checkpoint digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n = r.u32()? as usize;
        let state = r.take(n)?.to_vec();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
            let flags = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Integrity("tensor size overflows".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(NamedTensor {
                name,
                trainable: flags & FLAG_TRAINABLE != 0,
                optimizer: flags & FLAG_OPTIMIZER != 0,
                value: Tensor::new(shape, data)?,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after the last tensor".into()));
        }
        Ok(Self { config_digest, state, tensors })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// SHA-256 over names and values of every tensor for which `select` holds.
pub fn store_digest(store: &ParamStore, select: impl Fn(&str, bool) -> bool) -> [u8; 32] {
    let mut h = Sha256::new();
    for (_, name, value, trainable) in store.iter() {
        if !select(name, trainable) {
            continue;
        }
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}
