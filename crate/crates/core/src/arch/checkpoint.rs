//! Binary checkpoint format.
//!
//! ```text
//! "MRRN"                      4 bytes
//! version                     u32 LE
//! header length               u32 LE
//! header                      UTF-8 TOML: precision and [arch]
//! repeated until EOF:
//!   name length               u32 LE
//!   name                      UTF-8
//!   shape                     4 × u32 LE (n, c, h, w)
//!   values                    n·c·h·w little-endian reals
//! ```
//!
//! Trainable parameters come first in build order, followed by each
//! batch-norm layer's `running_mean`, `running_var` and `updates` entries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, ArchConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRRN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub precision: Precision,
    pub arch: ArchConfig,
}

fn precision_of<T: Real>() -> Precision {
    if T::BYTES == 4 {
        Precision::F32
    } else {
        Precision::F64
    }
}

fn push_entry<T: Real>(out: &mut Vec<u8>, name: &str, shape: Shape, values: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for d in shape.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Vec<u8> {
    let header = CheckpointHeader { precision: precision_of::<T>(), arch: model.config().clone() };
    let text = toml::to_string(&header).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for p in model.params() {
        push_entry(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
    }
    for (name, stats) in model.running_stats() {
        let shape = Shape::new(1, stats.mean.len(), 1, 1);
        push_entry(&mut out, &format!("{name}.running_mean"), shape, &stats.mean);
        push_entry(&mut out, &format!("{name}.running_var"), shape, &stats.var);
        push_entry(&mut out, &format!("{name}.updates"), Shape::SCALAR, &[T::of(stats.updates as f64)]);
    }
    out
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Decode {
                offset: self.pos as u64,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_header(r: &mut Reader<'_>) -> Result<CheckpointHeader> {
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Decode { offset: 0, reason: format!("bad magic {magic:?}, expected \"MRRN\"") });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Decode { offset: 4, reason: format!("unsupported version {version}") });
    }
    let len = r.u32("header length")? as usize;
    let start = r.pos as u64;
    let text = std::str::from_utf8(r.take(len, "header")?)
        .map_err(|e| Error::Decode { offset: start, reason: format!("header is not UTF-8: {e}") })?;
    let header: CheckpointHeader =
        toml::from_str(text).map_err(|e| Error::Decode { offset: start, reason: format!("bad header: {e}") })?;
    header.arch.validate()?;
    Ok(header)
}

pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&mut Reader { bytes: &bytes, pos: 0 })
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let header = decode_header(&mut r)?;
    if header.precision != precision_of::<T>() {
        return Err(Error::Decode {
            offset: 12,
            reason: format!("checkpoint holds {} values, requested {}", header.precision, T::NAME),
        });
    }
    let mut model: Model<T> = build_model(&header.arch, 0)?;

    let mut expected: Vec<(String, Shape)> =
        model.params().iter().map(|p| (p.name.clone(), p.tensor.shape())).collect();
    for (name, stats) in model.running_stats() {
        let shape = Shape::new(1, stats.mean.len(), 1, 1);
        expected.push((format!("{name}.running_mean"), shape));
        expected.push((format!("{name}.running_var"), shape));
        expected.push((format!("{name}.updates"), Shape::SCALAR));
    }

    let mut values: Vec<Vec<T>> = Vec::with_capacity(expected.len());
    for (want_name, want_shape) in &expected {
        let offset = r.pos as u64;
        let len = r.u32("entry name length")? as usize;
        let name = r.take(len, "entry name")?;
        if name != want_name.as_bytes() {
            return Err(Error::Decode {
                offset,
                reason: format!("expected entry `{want_name}`, found `{}`", String::from_utf8_lossy(name)),
            });
        }
        let dims = [r.u32("shape")?, r.u32("shape")?, r.u32("shape")?, r.u32("shape")?];
        let shape = Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
        if shape != *want_shape {
            return Err(Error::Decode { offset, reason: format!("`{want_name}` has shape {shape}, expected {want_shape}") });
        }
        let raw = r.take(shape.numel() * T::BYTES, "entry values")?;
        values.push(raw.chunks_exact(T::BYTES).map(T::read_le).collect());
    }
    if !r.at_end() {
        return Err(Error::Decode { offset: r.pos as u64, reason: "trailing bytes after last entry".into() });
    }

    let mut values = values.into_iter();
    for p in model.params_mut() {
        p.tensor = Tensor::from_vec(p.tensor.shape(), values.next().expect("counted"))?;
    }
    for (_, stats) in model.running_stats_mut() {
        stats.mean = values.next().expect("counted");
        stats.var = values.next().expect("counted");
        stats.updates = values.next().expect("counted")[0].as_f64() as u64;
    }
    Ok(model)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
