//! Binary checkpoint: the run configuration as text plus named parameter
//! arrays. All integers and values are little-endian.
//!
//! ```text
//! magic      9 bytes  "DMNETCKPT"
//! version    u32      1
//! config     u32 length, then UTF-8 `key = value` lines
//! count      u32      number of parameter arrays
//! per array  u32 name length, name bytes, u32 ndim, ndim × u64 dims,
//!            u8 dtype (4 = f32, 8 = f64), row-major values
//! ```

use std::path::Path;

use super::Model;
use crate::blocks::ParamStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"DMNETCKPT";
pub const VERSION: u32 = 1;

/// Parameters as stored: each array keeps its own precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredArray {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredArray {
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredArray::F32(t) => t.cast(),
            StoredArray::F64(t) => t.cast(),
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            StoredArray::F32(t) => t.shape(),
            StoredArray::F64(t) => t.shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<(String, StoredArray)>,
}

trait Store: Scalar {
    const TAG: u8;
    fn put(self, out: &mut Vec<u8>);
}

impl Store for f32 {
    const TAG: u8 = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Store for f64 {
    const TAG: u8 = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Checkpoint {
    /// Captures `model` under `config`, whose model section is replaced by
    /// the model's own configuration.
    pub fn from_model<T: Scalar>(model: &Model<T>, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        config.set_height(model.config.height);
        config.set_width(model.config.width);
        let params = model
            .params
            .iter()
            .map(|(name, t)| {
                let arr = if T::NAME == "f64" { StoredArray::F64(t.cast()) } else { StoredArray::F32(t.cast()) };
                (name.clone(), arr)
            })
            .collect();
        Checkpoint { config, params }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut store = ParamStore::new();
        for (name, arr) in &self.params {
            store.insert(name, arr.cast());
        }
        Model::from_parts(self.config.model.clone(), store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.serialize();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, arr) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = arr.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match arr {
                StoredArray::F32(t) => put_values(t, &mut out),
                StoredArray::F64(t) => put_values(t, &mut out),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        let config = RunConfig::parse(text)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(path, "bad parameter name"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = size.ok_or_else(|| Error::format(path, format!("{name}: shape overflows")))?;
            let arr = match r.u8()? {
                4 => {
                    let raw = r.take(size.checked_mul(4).ok_or_else(|| Error::format(path, "size overflow"))?)?;
                    let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    StoredArray::F32(Tensor::new(&shape, vals)?)
                }
                8 => {
                    let raw = r.take(size.checked_mul(8).ok_or_else(|| Error::format(path, "size overflow"))?)?;
                    let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    StoredArray::F64(Tensor::new(&shape, vals)?)
                }
                tag => return Err(Error::format(path, format!("{name}: unknown dtype tag {tag}"))),
            };
            params.push((name, arr));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last parameter"));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_values<T: Store>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.push(T::TAG);
    for &v in t.data() {
        v.put(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
