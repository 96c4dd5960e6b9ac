//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "QTBP" | u32 version | u32 kind tag
//! u64 epoch | f64 best validation NCE | u64 seed | f64 learning rate
//! u32 n_hyper  { u32 name_len | name | f64 value }*
//! u32 n_tensors { u32 name_len | name | u32 ndim | u64 dim* | f64 data* }*
//! ```

use std::fs;
use std::path::Path;

use crate::error::{QtError, Result};
use crate::model::{ModelKind, Parameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QTBP";
pub const VERSION: u32 = 1;

/// Training metadata stored next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub best_val_nce: f64,
    pub seed: u64,
    pub lr: f64,
    /// Named scalar settings the network needs at inference time (layers, epsilon, grid shape).
    pub hyper: Vec<(String, f64)>,
}

impl CheckpointMeta {
    pub fn hyper(&self, name: &str) -> Option<f64> {
        self.hyper.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// A checkpoint whose model kind is only known after reading the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub kind: ModelKind,
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<P> {
    pub params: P,
    pub meta: CheckpointMeta,
}

impl<P: Parameters> Checkpoint<P> {
    pub fn to_raw(&self) -> RawCheckpoint {
        RawCheckpoint {
            kind: P::KIND,
            meta: self.meta.clone(),
            tensors: self.params.to_tensors(),
        }
    }

    pub fn from_raw(raw: RawCheckpoint) -> Result<Self> {
        if raw.kind != P::KIND {
            return Err(QtError::KindMismatch {
                expected: P::KIND,
                found: raw.kind,
            });
        }
        Ok(Checkpoint {
            params: P::from_tensors(raw.tensors)?,
            meta: raw.meta,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_raw().to_bytes()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(self.kind.tag().to_le_bytes());
        out.extend(self.meta.epoch.to_le_bytes());
        out.extend(self.meta.best_val_nce.to_le_bytes());
        out.extend(self.meta.seed.to_le_bytes());
        out.extend(self.meta.lr.to_le_bytes());
        out.extend((self.meta.hyper.len() as u32).to_le_bytes());
        for (name, v) in &self.meta.hyper {
            put_str(&mut out, name);
            out.extend(v.to_le_bytes());
        }
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for x in &t.data {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(format_err("magic", "not a QTBP checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_err("version", format!("unsupported version {version}")));
        }
        let tag = r.u32("kind")?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| format_err("kind", format!("unknown model tag {tag}")))?;
        let epoch = r.u64("epoch")?;
        let best_val_nce = r.f64("best_val_nce")?;
        let seed = r.u64("seed")?;
        let lr = r.f64("lr")?;
        let n_hyper = r.u32("hyper count")?;
        let mut hyper = Vec::new();
        for _ in 0..n_hyper {
            let name = r.string("hyper name")?;
            hyper.push((name, r.f64("hyper value")?));
        }
        let n_tensors = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string("tensor name")?;
            let ndim = r.u32("tensor rank")?;
            let mut shape = Vec::new();
            for _ in 0..ndim {
                shape.push(r.u64("tensor shape")? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = match len {
                Some(n) if n.saturating_mul(8) <= bytes.len() => n,
                _ => return Err(format_err("tensor shape", format!("tensor `{name}` has an impossible shape {shape:?}"))),
            };
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64("tensor data")?);
            }
            tensors.push(Tensor::new(name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(format_err("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(RawCheckpoint {
            kind,
            meta: CheckpointMeta {
                epoch,
                best_val_nce,
                seed,
                lr,
                hyper,
            },
            tensors,
        })
    }
}

fn format_err(field: &'static str, msg: impl Into<String>) -> QtError {
    QtError::Format { field, msg: msg.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(field, "file is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn string(&mut self, field: &'static str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let raw = self.take(n, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_err(field, "name is not UTF-8"))
    }
}

pub fn save_checkpoint<P: Parameters>(path: impl AsRef<Path>, ckpt: &Checkpoint<P>) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_raw_checkpoint(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    RawCheckpoint::from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint, failing with a kind-mismatch error if it holds another model.
pub fn load_checkpoint<P: Parameters>(path: impl AsRef<Path>) -> Result<Checkpoint<P>> {
    Checkpoint::from_raw(load_raw_checkpoint(path)?)
}
