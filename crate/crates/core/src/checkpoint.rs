//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `LFCK`, u32 version, u32 config length and
//! the model config as `key = value` text, u32 tensor count, then per tensor
//! u16 name length, name, u8 dtype code, u8 kind (0 trainable, 1 buffer),
//! u8 rank, u32 dims, and the raw element payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LfiCamModel, ModelConfig};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &LfiCamModel<T>) -> Vec<u8> {
    let config = model.config().to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let entries = model.store().entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        out.push(e.value.shape().len() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            match T::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("needs {n} more bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<LfiCamModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u32()? as usize;
    let config_at = r.pos;
    let text = std::str::from_utf8(r.take(config_len)?).map_err(|_| Error::Format {
        what: "checkpoint",
        offset: config_at,
        detail: "config is not UTF-8".into(),
    })?;
    let config = ModelConfig::from_toml(text)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::<T>::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format {
                what: "checkpoint",
                offset: name_at,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let dtype_at = r.pos;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format {
            what: "checkpoint",
            offset: dtype_at,
            detail: "unknown dtype".into(),
        })?;
        if dtype != T::DTYPE {
            return Err(Error::Format {
                what: "checkpoint",
                offset: dtype_at,
                detail: format!("tensor {name} is {dtype:?}, expected {:?}", T::DTYPE),
            });
        }
        let kind = match r.u8()? {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(r.err(format!("unknown tensor kind {k}"))),
        };
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let payload = r.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        store.add(name, Tensor::new(&dims, data)?, kind);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    LfiCamModel::from_store(config, &store)
}

pub fn save_checkpoint<T: Scalar>(model: &LfiCamModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LfiCamModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
