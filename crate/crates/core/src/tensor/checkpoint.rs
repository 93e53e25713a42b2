//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian): magic `SCNT`, version `u32`, entry
//! count `u32`, then per entry: name length `u32`, name bytes, dtype tag `u8`
//! (0 = f64, 1 = f32, 2 = raw bytes), rank `u32`, dims as `u64`, payload.
//! An optional JSON config travels as the byte entry `meta.config`.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCNT";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_ENTRY: &str = "meta.config";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self { params, config: None }
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, self, Precision::F64)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        read_checkpoint(&mut f)
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint, precision: Precision) -> Result<()> {
    let config = ckpt.config.as_ref().map(serde_json::to_vec).transpose()?;
    let count = ckpt.params.len() + usize::from(config.is_some());
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, count as u32)?;
    let header = |w: &mut W, name: &str, tag: u8, dims: &[usize]| -> Result<()> {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[tag])?;
        put_u32(w, dims.len() as u32)?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        Ok(())
    };
    for (name, t) in ckpt.params.iter() {
        match precision {
            Precision::F64 => {
                header(w, name, 0, t.shape())?;
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Precision::F32 => {
                header(w, name, 1, t.shape())?;
                for &v in t.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    if let Some(bytes) = config {
        header(w, CONFIG_ENTRY, 2, &[bytes.len()])?;
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let magic: [u8; 4] = take(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = u32::from_le_bytes(take(r)?);
    let mut params = ParamStore::new();
    let mut config = None;
    for _ in 0..count {
        let len = u32::from_le_bytes(take(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let [tag] = take::<_, 1>(r)?;
        let rank = u32::from_le_bytes(take(r)?) as usize;
        let dims = (0..rank)
            .map(|_| take::<_, 8>(r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        match tag {
            0 => {
                let data = (0..n)
                    .map(|_| take::<_, 8>(r).map(f64::from_le_bytes))
                    .collect::<Result<Vec<_>>>()?;
                params.insert(name, Tensor::new(dims, data)?);
            }
            1 => {
                let data = (0..n)
                    .map(|_| take::<_, 4>(r).map(|b| f64::from(f32::from_le_bytes(b))))
                    .collect::<Result<Vec<_>>>()?;
                params.insert(name, Tensor::new(dims, data)?);
            }
            2 => {
                let mut bytes = vec![0u8; n];
                r.read_exact(&mut bytes)
                    .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
                if name == CONFIG_ENTRY {
                    config = Some(serde_json::from_slice(&bytes)?);
                }
            }
            t => return Err(Error::Checkpoint(format!("unknown dtype tag {t} for '{name}'"))),
        }
    }
    Ok(Checkpoint { params, config })
}
