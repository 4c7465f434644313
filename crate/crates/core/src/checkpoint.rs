//! Checkpoint format: the full training state in one canonical byte stream.
//!
//! Layout (all integers little endian):
//!   magic `CLFCKPT1` (8 bytes), format version u32,
//!   config JSON (u64 length + bytes),
//!   step u64, optimizer timestep u64, RNG word position u128,
//!   three tensor sections (parameters, first moments, second moments), each
//!   `u64 count` then per tensor: u32 path length, path bytes, u32 rank,
//!   dims as u64, values as f64.
//!
//! Tensors are written in sorted path order, so identical training states
//! produce identical bytes.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: [u8; 8] = *b"CLFCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: usize,
    /// Batch-sampler RNG position, for exact resume.
    pub rng_word_pos: u128,
}

fn write_tensor_section<'a>(
    out: &mut Vec<u8>,
    tensors: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>,
) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (path, tensor) in tensors {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corruption("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn tensor_section(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u64()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let plen = self.u32()? as usize;
            let path = String::from_utf8(self.take(plen)?.to_vec())
                .map_err(|_| Error::Corruption("non-utf8 parameter path".into()))?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = self.take(n * 8)?;
            let mut data = Vec::with_capacity(n);
            for chunk in bytes.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            if map.insert(path.clone(), Tensor::from_vec(&shape, data)).is_some() {
                return Err(Error::Corruption(format!("duplicate tensor path {path}")));
            }
        }
        Ok(map)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config_json = serde_json::to_string(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(config_json.as_bytes());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        write_tensor_section(&mut out, self.params.iter());
        write_tensor_section(&mut out, self.adam.m.iter());
        write_tensor_section(&mut out, self.adam.v.iter());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )));
        }
        let config_len = r.u64()? as usize;
        let config_bytes = r.take(config_len)?;
        let config: TrainConfig = serde_json::from_slice(config_bytes)?;
        let step = r.u64()? as usize;
        let adam_t = r.u64()?;
        let rng_word_pos = r.u128()?;
        let param_map = r.tensor_section()?;
        let m = r.tensor_section()?;
        let v = r.tensor_section()?;
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let mut params = ParamStore::new();
        for (path, tensor) in param_map {
            params.insert(path, tensor);
        }
        let param_paths: Vec<&String> = params.paths().collect();
        for (name, map) in [("first", &m), ("second", &v)] {
            if map.len() != param_paths.len() || !param_paths.iter().all(|p| map.contains_key(*p)) {
                return Err(Error::Corruption(format!(
                    "{name}-moment section does not match the parameter set"
                )));
            }
        }
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState { m, v, t: adam_t },
            step,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}
