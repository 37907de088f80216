//! Versioned binary model checkpoints.
//!
//! Layout, little-endian: magic `CCAN`, u16 version, u32 length plus the
//! JSON-encoded configuration, u32 parameter count, then per parameter a u16
//! name length and UTF-8 name, u8 rank, u32 extents and the values as f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CcanConfig, CcanModel};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCAN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint<T: Real>(config: &CcanConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Data(format!("parameter name {:?} too long", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len().saturating_sub(self.pos) < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("checkpoint truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Rebuilds the model from the stored configuration, then overwrites every
/// parameter with the stored values. Names and shapes must match exactly.
pub fn decode_checkpoint<T: Real>(buf: &[u8]) -> Result<CcanModel<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected CCAN".into(),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let config: CcanConfig = serde_json::from_slice(r.take(len, "config")?).map_err(|e| Error::Format {
        offset: at as u64,
        msg: format!("config: {e}"),
    })?;
    let mut model = CcanModel::<T>::init(config.clone(), config.seed)?;
    let count = r.u32("parameter count")? as usize;
    if count != model.params().len() {
        return Err(Error::Format {
            offset: r.pos as u64 - 4,
            msg: format!("{count} parameters stored, configuration defines {}", model.params().len()),
        });
    }
    for id in model.params().ids().collect::<Vec<_>>() {
        let at = r.pos as u64;
        let nlen = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?).map_err(|_| Error::Format {
            offset: at,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let expect = &model.params().param(id).name;
        if name != expect {
            return Err(Error::Format {
                offset: at,
                msg: format!("parameter {name:?} found where {expect:?} was expected"),
            });
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n, "values")?
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        model
            .params_mut()
            .set(id, Tensor::new(shape, data)?)
            .map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after the last parameter".into(),
        });
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &CcanModel<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model.config(), model.params())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<CcanModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
