//! Binary parameter container.
//!
//! Layout, little-endian: magic `LAFBCKPT`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` extents and
//! raw `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LAFBCKPT";
pub const VERSION: u32 = 1;

pub fn encode(named: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", version)));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(path, format!("`{}` has an overflowing shape", name)))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(&store.to_named())).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads into an existing store; names and shapes must match exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    store.load_from(&load(path)?)
}

/// Top-level parameter groups, always listed in the manifest.
pub const MODULES: [&str; 6] = ["encoder", "bank", "iigm", "rfb", "decoder", "head"];

/// Plain-text manifest: the run configuration followed by parameter counts.
pub fn manifest(config_toml: &str, store: &ParamStore) -> String {
    let mut out = String::from("# configuration\n");
    out.push_str(config_toml);
    if !config_toml.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("\n# parameters\n");
    let counts = store.counts_by_module();
    let extra = counts.keys().filter(|k| !MODULES.contains(&k.as_str())).map(String::as_str);
    for module in MODULES.iter().copied().chain(extra) {
        out.push_str(&format!("{} = {}\n", module, counts.get(module).copied().unwrap_or(0)));
    }
    out.push_str(&format!("total = {}\n", store.scalar_count()));
    out
}

/// Reads the per-module counts back from a manifest.
pub fn manifest_counts(text: &str) -> Vec<(String, usize)> {
    text.split("# parameters")
        .nth(1)
        .unwrap_or("")
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| Some((k.trim().to_string(), v.trim().parse().ok()?)))
        .collect()
}
