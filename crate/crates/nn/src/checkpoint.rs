//! Binary checkpoint format.
//!
//! ```text
//! SNAPTURE-CHECKPOINT 1
//! metadata <bytes>
//! <metadata bytes>
//! tensors <count>
//! <name> <trainable 0|1> <dims, 'x'-separated, '-' for scalars> <offset> <len>
//! ...
//! end
//! <little-endian f32 blob>
//! ```
//!
//! Offsets and lengths count f32 elements from the start of the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "SNAPTURE-CHECKPOINT";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn to_bytes(store: &ParamStore<f32>, metadata: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC} {VERSION}")?;
    writeln!(out, "metadata {}", metadata.len())?;
    out.extend_from_slice(metadata.as_bytes());
    writeln!(out)?;
    writeln!(out, "tensors {}", store.len())?;
    let mut offset = 0usize;
    for id in store.ids() {
        let name = store.name(id);
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(bad(format!("tensor name {name:?} must be non-empty without whitespace")));
        }
        let t = store.get(id);
        let dims = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
        };
        writeln!(out, "{name} {} {dims} {offset} {}", u8::from(store.is_trainable(id)), t.len())?;
        offset += t.len();
    }
    writeln!(out, "end")?;
    for id in store.ids() {
        for v in store.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore<f32>, String)> {
    let mut pos = 0usize;
    let mut line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not utf-8"))
    };
    let header = line()?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad("not a checkpoint file"))?;
    if version != VERSION.to_string() {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let meta_len: usize = line()?
        .strip_prefix("metadata ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing metadata length"))?;
    if pos + meta_len + 1 > bytes.len() {
        return Err(bad("truncated metadata"));
    }
    let metadata = std::str::from_utf8(&bytes[pos..pos + meta_len])
        .map_err(|_| bad("metadata is not utf-8"))?
        .to_string();
    pos += meta_len + 1;
    let mut line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated manifest"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not utf-8"))
    };
    let count: usize = line()?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let l = line()?;
        let fields: Vec<&str> = l.split(' ').collect();
        let [name, trainable, dims, offset, len] = fields[..] else {
            return Err(bad(format!("malformed manifest line {l:?}")));
        };
        let shape: Vec<usize> = if dims == "-" {
            vec![]
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dims {dims:?}"))))
                .collect::<Result<_>>()?
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));
        entries.push((name.to_string(), trainable == "1", shape, num(offset)?, num(len)?));
    }
    if line()? != "end" {
        return Err(bad("missing end marker"));
    }
    let blob = &bytes[pos..];
    let mut store = ParamStore::new();
    for (name, trainable, shape, offset, len) in entries {
        let start = offset * 4;
        let stop = start + len * 4;
        if stop > blob.len() {
            return Err(bad(format!("tensor {name} extends past the blob")));
        }
        let data = blob[start..stop]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        store.add(&name, t, trainable)?;
    }
    Ok((store, metadata))
}

pub fn save(path: &Path, store: &ParamStore<f32>, metadata: &str) -> Result<()> {
    fs::write(path, to_bytes(store, metadata)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, String)> {
    from_bytes(&fs::read(path)?)
}
