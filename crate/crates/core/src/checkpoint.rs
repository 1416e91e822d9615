//! Binary model checkpoints.
//!
//! Layout (integers little-endian `u32` unless noted):
//!
//! ```text
//! "CSEG"  version:u8
//! n_enc  enc_filters[n_enc]  n_dec  dec_filters[n_dec]
//! kernel_extent  dropout:f64  input_rows  input_cols
//! n_tensors
//! per tensor: name_len  name[name_len]  rank  dims[rank]  values:f32[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::{Model, UNetConfig};

pub const MAGIC: &[u8; 4] = b"CSEG";
pub const VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &Model) -> Vec<u8> {
    let c = model.config();
    let mut out = MAGIC.to_vec();
    out.push(VERSION);
    for filters in [&c.encoder_filters, &c.decoder_filters] {
        put_u32(&mut out, filters.len());
        filters.iter().for_each(|&f| put_u32(&mut out, f));
    }
    put_u32(&mut out, c.kernel_extent);
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    put_u32(&mut out, c.input_rows);
    put_u32(&mut out, c.input_cols);
    put_u32(&mut out, model.parameters().len());
    for (name, t) in model.parameters() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        t.shape().iter().for_each(|&d| put_u32(&mut out, d));
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            what,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn format(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let mut filters = [Vec::new(), Vec::new()];
    for f in filters.iter_mut() {
        let n = r.u32("filter count")?;
        if n > 64 {
            return Err(r.format(format!("implausible block count {n}")));
        }
        for _ in 0..n {
            f.push(r.u32("filter list")?);
        }
    }
    let [encoder_filters, decoder_filters] = filters;
    let config = UNetConfig {
        encoder_filters,
        decoder_filters,
        kernel_extent: r.u32("kernel extent")?,
        dropout_rate: r.f64("dropout rate")?,
        input_rows: r.u32("input rows")?,
        input_cols: r.u32("input cols")?,
    };
    let count = r.u32("tensor count")?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("tensor name length")?;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
            .map_err(|_| r.format("tensor name is not UTF-8"))?;
        let rank = r.u32("tensor rank")?;
        if rank == 0 || rank > 8 {
            return Err(r.format(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")?);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| r.format(format!("tensor {name} dims overflow")))?;
        let raw = r.take(n.saturating_mul(4), "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    config.validate()?;
    Model::from_parameters(config, params)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads and checks the architecture against `expected` (input extents
/// excluded, since the network is fully convolutional).
pub fn load_checkpoint_expecting(path: &Path, expected: &UNetConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    let found = model.config();
    let same = found.encoder_filters == expected.encoder_filters
        && found.decoder_filters == expected.decoder_filters
        && found.kernel_extent == expected.kernel_extent;
    if !same {
        return Err(Error::ConfigMismatch {
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(model)
}
