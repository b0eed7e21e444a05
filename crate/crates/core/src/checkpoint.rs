//! `DSEGPRM` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSEGPRM"            7 bytes
//! version              u16 (= 1)
//! count                u32
//! count × { name_len u32, name utf-8, ndim u32, dims u32 × ndim }
//! values               f64 × Σ numel, parameters in manifest order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"DSEGPRM";
pub const VERSION: u16 = 1;

pub fn encode(named: &[(&str, &Tensor)]) -> Vec<u8> {
    let values: usize = named.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(64 + 32 * named.len() + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::parse(format!(
                    "checkpoint truncated reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::parse("not a DSEGPRM checkpoint (bad magic)"));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::parse(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("parameter count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse("parameter name is not utf-8"))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        manifest.push((name, shape));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::parse("extent overflow"))?, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let named: Vec<(&str, &Tensor)> = params.named().collect();
    fs::write(path, encode(&named))?;
    Ok(())
}

pub fn load(path: &Path, arch: &ArchConfig) -> Result<ModelParams> {
    ModelParams::from_named(arch, decode(&fs::read(path)?)?)
}
