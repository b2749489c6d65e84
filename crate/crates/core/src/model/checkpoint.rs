//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDCK"  u32 version
//! u32 n   config as JSON (n bytes)
//! u32 k   k × (u32 name_len, name, u32 text_len, text)     text attachments
//! u32 p   p × (u32 name_len, name, u32 ndim, ndim × u64 extent, f64 values)
//! ```
//!
//! Attachments carry auxiliary text such as the subword models, so one file
//! is enough to translate. Parameter names are the model's own names; loading
//! requires the exact parameter set the stored config implies.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{DualModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"DDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualModel,
    pub attachments: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint("field too large".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn to_bytes(model: &DualModel, attachments: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_string(&model.config).map_err(|e| Error::Internal(e.to_string()))?;
    put_str(&mut out, &cfg)?;
    put_u32(&mut out, attachments.len())?;
    for (k, v) in attachments {
        put_str(&mut out, k)?;
        put_str(&mut out, v)?;
    }
    put_u32(&mut out, model.params.len())?;
    for (_, name, t) in model.params.iter() {
        put_str(&mut out, name)?;
        put_u32(&mut out, t.shape().len())?;
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let config: ModelConfig =
        serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    let mut attachments = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        attachments.insert(k, r.string()?);
    }
    let mut values = HashMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let ndim = r.u32()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if values.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        model: DualModel::from_named(config, values)?,
        attachments,
    })
}

pub fn save_checkpoint(path: &Path, model: &DualModel, attachments: &BTreeMap<String, String>) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(model, attachments)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

impl DualModel {
    /// Loads a checkpoint that must have been saved with exactly `config`.
    pub fn load_as(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
        let ck = load_checkpoint(path)?;
        if ck.model.config.coupling != config.coupling {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {:?} model, {:?} requested",
                ck.model.config.coupling, config.coupling
            )));
        }
        if &ck.model.config != config {
            return Err(Error::Checkpoint("checkpoint configuration differs from the requested one".into()));
        }
        Ok(ck)
    }
}
