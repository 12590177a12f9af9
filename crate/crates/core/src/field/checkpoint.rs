//! Binary checkpoint of a [`FieldParams`].
//!
//! ```text
//! "FACT" | version u32 | dtype u32 (0 = f32, 1 = f64)
//! | levels u32 | features u32 | table_size u32 | base_resolution u32 | growth f64
//! | n_widths u32 | widths u32 × n_widths | parameters (dtype) × len
//! ```
//! Everything is little-endian. The output bias initialization is not part
//! of the architecture and is not stored.

use std::fs;
use std::path::Path;

use super::config::{default_init_mu, FieldConfig, HashGridConfig, Layout};
use super::params::FieldParams;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Real};

pub const MAGIC: &[u8; 4] = b"FACT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(params: &FieldParams<T>) -> Vec<u8> {
    let g = &params.config.grid;
    let widths = params.config.widths();
    let mut out = Vec::with_capacity(48 + widths.len() * 4 + params.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    for v in [CHECKPOINT_VERSION, T::DTYPE.tag(), g.levels as u32, g.features_per_level as u32, g.table_size as u32, g.base_resolution as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&g.growth.to_le_bytes());
    out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in &widths {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    for v in &params.data {
        v.write_le(&mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { path: self.path.to_path_buf(), field, reason: "file ends early".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Header fields of a checkpoint, readable without knowing its dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: Dtype,
    pub config: FieldConfig,
}

fn decode_header<'a>(bytes: &'a [u8], path: &'a Path) -> Result<(CheckpointHeader, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0, path };
    let bad = |field, reason: String| Error::Format { path: path.to_path_buf(), field, reason };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad("magic", "not a field checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            field: "version",
            found: version.to_string(),
            supported: CHECKPOINT_VERSION.to_string(),
        });
    }
    let tag = r.u32("dtype")?;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::Unsupported {
        path: path.to_path_buf(),
        field: "dtype",
        found: tag.to_string(),
        supported: "0 (f32) or 1 (f64)".into(),
    })?;
    let levels = r.u32("levels")? as usize;
    let features = r.u32("features")? as usize;
    let table_size = r.u32("table_size")? as usize;
    let base_resolution = r.u32("base_resolution")? as usize;
    let growth = f64::from_le_bytes(r.take(8, "growth")?.try_into().unwrap());
    let n_widths = r.u32("widths")? as usize;
    if !(2..=1024).contains(&n_widths) {
        return Err(bad("widths", format!("{n_widths} layer widths")));
    }
    let widths: Vec<usize> = (0..n_widths).map(|_| r.u32("widths").map(|w| w as usize)).collect::<Result<_>>()?;
    let config = FieldConfig {
        grid: HashGridConfig { levels, features_per_level: features, table_size, base_resolution, growth },
        hidden: widths[1..n_widths - 1].to_vec(),
        init_mu: default_init_mu(),
    };
    config.validate().map_err(|e| bad("config", e.to_string()))?;
    if config.widths() != widths {
        return Err(bad("widths", format!("{widths:?} inconsistent with {levels} levels × {features} features and scalar output")));
    }
    Ok((CheckpointHeader { version, dtype, config }, r))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<FieldParams<T>> {
    let (header, mut r) = decode_header(bytes, path)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            field: "dtype",
            found: format!("{:?}", header.dtype),
            supported: format!("{:?}", T::DTYPE),
        });
    }
    let layout = Layout::new(&header.config);
    let size = T::DTYPE.size();
    let expected = r.pos + layout.len * size;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch { path: path.to_path_buf(), expected: expected as u64, actual: bytes.len() as u64 });
    }
    let payload = r.take(layout.len * size, "parameters")?;
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Ok(FieldParams { config: header.config, layout, data })
}

pub fn save_checkpoint<T: Real>(params: &FieldParams<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FieldParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes, path).map(|(h, _)| h)
}
