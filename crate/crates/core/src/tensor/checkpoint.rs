//! `CFW1` parameter checkpoints.
//!
//! Layout: the magic bytes, a u32 little-endian byte length, a UTF-8 manifest
//! with one `name<TAB>d0,d1,...` line per parameter, then the raw
//! little-endian f64 payloads in manifest order.

use std::io::{Read, Write};

use super::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFW1";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut out: W) -> Result<()> {
    let order = store.serialization_order();
    let mut manifest = String::new();
    for &id in &order {
        let p = store.get(id);
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&p.name);
        manifest.push('\t');
        manifest.push_str(&dims.join(","));
        manifest.push('\n');
    }
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(manifest.len() as u32).to_le_bytes())?;
    out.write_all(manifest.as_bytes())?;
    for &id in &order {
        for v in store.get(id).value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a checkpoint into `store`, which must hold exactly the same names and shapes.
pub fn read_checkpoint<R: Read>(store: &mut ParamStore, mut input: R) -> Result<()> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let corrupt = |offset: usize, msg: &str| Error::Corrupt {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let manifest = bytes
        .get(8..8 + len)
        .ok_or_else(|| corrupt(8, "truncated manifest"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| corrupt(8, "manifest is not UTF-8"))?;
    let mut entries = Vec::new();
    for line in manifest.lines() {
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| corrupt(8, "malformed manifest line"))?;
        let shape = dims
            .split(',')
            .filter(|d| !d.is_empty())
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| corrupt(8, "malformed shape"))?;
        entries.push((name.to_string(), shape));
    }
    if entries.len() != store.len() {
        return Err(corrupt(8, "parameter count differs from model"));
    }
    let mut offset = 8 + len;
    let mut staged = Vec::with_capacity(entries.len());
    for (name, shape) in &entries {
        let id = store.id(name)?;
        if store.value(id).shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "read_checkpoint",
                lhs: store.value(id).shape().to_vec(),
                rhs: shape.clone(),
            });
        }
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| corrupt(offset, "truncated payload"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        staged.push((id, data));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(corrupt(offset, "trailing bytes"));
    }
    for (id, data) in staged {
        store.get_mut(id).value.data_mut().copy_from_slice(&data);
    }
    Ok(())
}
