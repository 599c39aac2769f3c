//! Versioned binary checkpoints (little-endian):
//!
//! ```text
//! magic "EMAVIOCK" | u32 version | u64 step | u32 len + model config TOML
//! u32 parameter count, then per parameter:
//!   u32 len + name | u32 rank | u64 dims[rank] | u64 adam step count
//!   f64 values[n] | f64 adam_m[n] | f64 adam_v[n]
//! ```

use std::fs;
use std::path::Path;

use emavio_tensor::{ParamStore, Parameter, Tensor};

use crate::config::ModelConfig;
use crate::model::Model;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EMAVIOCK";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Optimizer steps taken.
    pub step: u64,
    pub model: Model,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(step: u64, model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    let cfg = toml::to_string(&model.cfg).expect("model config serializes");
    put_bytes(&mut out, cfg.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for p in model.store.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.step_count.to_le_bytes());
        put_f64s(&mut out, p.value.data());
        put_f64s(&mut out, p.adam_m.data());
        put_f64s(&mut out, p.adam_v.data());
    }
    out
}

/// Writes through a temporary file so an interrupted save never leaves a
/// partial checkpoint behind.
pub fn save(path: &Path, step: u64, model: &Model) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(step, model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let step = r.u64()?;
    let cfg: ModelConfig =
        toml::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    cfg.validate()?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let step_count = r.u64()?;
        let value = r.tensor(&shape)?;
        let mut p = Parameter::new(name, value);
        p.adam_m = r.tensor(&shape)?;
        p.adam_v = r.tensor(&shape)?;
        p.step_count = step_count;
        let id = store.insert(p.name.clone(), p.value.clone())?;
        *store.get_mut(id) = p;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let expected = Model::parameter_specs(&cfg);
    let layout_ok = expected.len() == store.len()
        && expected
            .iter()
            .zip(store.iter())
            .all(|((n, s, _), p)| *n == p.name && s.as_slice() == p.value.shape());
    if !layout_ok {
        return Err(Error::Checkpoint(
            "parameter layout does not match the echoed model config".into(),
        ));
    }
    Ok(Checkpoint {
        step,
        model: Model { cfg, store },
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads `path`, refusing it unless its model config equals `cfg`.
pub fn load_matching(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if &ckpt.model.cfg != cfg {
        return Err(Error::Checkpoint(format!(
            "{}: model config differs from the active config\ncheckpoint:\n{}\nactive:\n{}",
            path.display(),
            toml::to_string(&ckpt.model.cfg).unwrap_or_default(),
            toml::to_string(cfg).unwrap_or_default()
        )));
    }
    Ok(ckpt)
}
