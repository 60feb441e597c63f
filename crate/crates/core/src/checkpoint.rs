//! Checkpoint container.
//!
//! A small self-describing binary format written byte-for-byte
//! deterministically: entries are sorted by name and all integers are
//! little-endian, so saving the same parameters twice yields identical
//! files. Layout:
//!
//! ```text
//! magic "RDCK" | u32 version | u64 meta_len | meta (JSON)
//! u64 entry count, then per entry:
//!   u64 name_len | name | u8 dtype (0 = f32, 1 = f64) | u8 trainable
//!   u64 rank | u64 dims... | raw little-endian element bytes
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RDCK";
const VERSION: u32 = 1;

/// Bookkeeping stored alongside the tensors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub stage: u32,
    /// Canonical text of the run configuration that produced the weights.
    pub config: String,
}

pub struct LoadedCheckpoint {
    pub tensors: HashMap<String, Tensor>,
    pub trainable: HashMap<String, bool>,
    pub meta: CheckpointMeta,
}

fn dtype_tag(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Invalid(format!(
            "checkpoint does not store {other:?} tensors"
        ))),
    }
}

fn tag_dtype(tag: u8) -> Result<DType> {
    match tag {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        other => Err(Error::Invalid(format!("unknown dtype tag {other}"))),
    }
}

/// Writes `entries` and `meta` to `path`. Entries are `(name, tensor,
/// trainable)`; the caller usually passes `ParamStore::entries()`, which is
/// already name-sorted.
pub fn save(path: &Path, entries: &[(String, Tensor, bool)], meta: &CheckpointMeta) -> Result<()> {
    let mut sorted: Vec<&(String, Tensor, bool)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Invalid(format!("duplicate entry {}", pair[0].0)));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta_bytes).map_err(io)?;
    w.write_all(&(sorted.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, tensor, trainable) in sorted {
        w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[dtype_tag(tensor.dtype())?, u8::from(*trainable)])
            .map_err(io)?;
        let dims = tensor.dims();
        w.write_all(&(dims.len() as u64).to_le_bytes()).map_err(io)?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        match tensor.dtype() {
            DType::F32 => {
                for v in tensor.flatten_all()?.to_vec1::<f32>()? {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            DType::F64 => {
                for v in tensor.flatten_all()?.to_vec1::<f64>()? {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            _ => unreachable!("tag check rejects other dtypes"),
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Invalid("checkpoint truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load(path: &Path, device: &Device) -> Result<LoadedCheckpoint> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Invalid(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Invalid(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
    let count = cur.u64()? as usize;
    let mut tensors = HashMap::with_capacity(count);
    let mut trainable = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Invalid("entry name is not utf-8".into()))?
            .to_string();
        let dtype = tag_dtype(cur.u8()?)?;
        let is_var = cur.u8()? != 0;
        let rank = cur.u64()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let tensor = match dtype {
            DType::F32 => {
                let raw = cur.take(count * 4)?;
                let vals: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(vals, dims, device)?
            }
            DType::F64 => {
                let raw = cur.take(count * 8)?;
                let vals: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(vals, dims, device)?
            }
            _ => unreachable!(),
        };
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Invalid(format!("duplicate entry {name}")));
        }
        trainable.insert(name, is_var);
    }
    if cur.pos != buf.len() {
        return Err(Error::Invalid(format!(
            "{} trailing bytes after the last entry",
            buf.len() - cur.pos
        )));
    }
    Ok(LoadedCheckpoint {
        tensors,
        trainable,
        meta,
    })
}
