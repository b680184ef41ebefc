//! Binary checkpoint: magic `SIMACKPT`, `u32` version, length-prefixed JSON
//! [`ModelConfig`], `u32` tensor count, then per tensor a length-prefixed
//! UTF-8 name, `u32` rank, `u64` dims and little-endian `f64` data. All
//! integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::params::ParamStore;
use super::ModelConfig;

const MAGIC: &[u8; 8] = b"SIMACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, len: usize) -> Result<()> {
    let v = u32::try_from(len).map_err(|_| Error::Contract(format!("length {len} too large")))?;
    put_u32(out, v);
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(&ckpt.config).map_err(|e| Error::Contract(e.to_string()))?;
    put_len(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    put_len(&mut out, ckpt.params.len())?;
    for (name, t) in ckpt.params.iter() {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.rank())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format(self.path, "truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::format(self.path, "dimension overflow"))
    }
}

/// Reads a checkpoint and checks that its tensors match the stored config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(path, format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::format(path, format!("config: {e}")))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(path, "tensor too large"))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::format(path, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        tensors.insert(name, t);
    }
    if !r.buf.is_empty() {
        return Err(Error::format(path, "trailing bytes"));
    }
    let expected = ParamStore::init(&config, &mut Rng::new(0))?;
    let shapes_match = expected.len() == tensors.len()
        && expected
            .iter()
            .all(|(n, t)| tensors.get(n).is_some_and(|u| u.shape() == t.shape()));
    if !shapes_match {
        return Err(Error::format(
            path,
            "parameters do not match the stored config",
        ));
    }
    Ok(Checkpoint {
        config,
        params: ParamStore::from_map(tensors),
    })
}
