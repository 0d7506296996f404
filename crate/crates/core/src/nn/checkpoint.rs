//! Checkpoint files: one binary blob of named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8     magic "SNCKPT01"
//! bytes 8..12    u32 manifest length M in bytes
//! bytes 12..12+M UTF-8 manifest, one line per array:
//!                name \t dims joined by 'x' \t byte offset \t element count \n
//! remainder      data section: f32 LE values, row-major; offsets are
//!                relative to the start of the data section
//! ```
//!
//! Arrays are written in parameter-store order with no padding.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SNCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut manifest = String::new();
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\t{offset}\t{}\n", dims.join("x"), t.len()));
        offset += 4 * t.len();
    }
    let mut out = Vec::with_capacity(12 + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint into its manifest and arrays.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(CheckpointEntry, Tensor)>> {
    let bad = |message: &str| Error::Checkpoint { path: path.to_path_buf(), message: message.to_string() };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing SNCKPT01 magic"));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| bad("truncated manifest"))
        .and_then(|m| std::str::from_utf8(m).map_err(|_| bad("manifest is not UTF-8")))?;
    let data = &bytes[12 + mlen..];
    let mut out = Vec::new();
    for line in manifest.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset, count] = fields[..] else {
            return Err(bad(&format!("malformed manifest line {line:?}")));
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(&format!("bad shape {dims:?}")))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let count: usize = count.parse().map_err(|_| bad("bad count"))?;
        if shape.iter().product::<usize>() != count {
            return Err(bad(&format!("{name}: shape {dims} does not hold {count} values")));
        }
        let raw = data
            .get(offset..offset + 4 * count)
            .ok_or_else(|| bad(&format!("{name}: data out of range")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let entry = CheckpointEntry { name: name.to_string(), shape: shape.clone(), offset, count };
        out.push((entry, Tensor::new(&shape, values)));
    }
    Ok(out)
}

/// Loads a checkpoint into `store`; every store parameter must be present
/// with the same shape, and the file may not carry unknown arrays.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode_checkpoint(&bytes, path)?;
    let bad = |message: String| Error::Checkpoint { path: path.to_path_buf(), message };
    if entries.len() != store.len() {
        return Err(bad(format!(
            "holds {} arrays but the model has {} parameters",
            entries.len(),
            store.len()
        )));
    }
    for (entry, tensor) in entries {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| bad(format!("unknown parameter {}", entry.name)))?;
        if store.get(id).shape() != tensor.shape() {
            return Err(bad(format!(
                "{}: shape {:?} does not match model shape {:?}",
                entry.name,
                tensor.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, tensor);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.0]));
        s.add("b", Tensor::row(vec![0.125]));
        let bytes = encode_checkpoint(&s);
        let entries = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(entries[0].0.name, "a.weight");
        assert_eq!(entries[0].0.shape, vec![2, 3]);
        assert_eq!(entries[1].0.offset, 24);
        assert_eq!(entries[0].1.data()[4] as f32, 1e-3f32);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&s, &path).unwrap();
        let mut fresh = ParamStore::new();
        fresh.zeros("a.weight", &[2, 3]);
        fresh.zeros("b", &[1, 1]);
        load_checkpoint(&mut fresh, &path).unwrap();
        assert_eq!(fresh.get(fresh.id("b").unwrap()).data(), &[0.125]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = ParamStore::new();
        s.zeros("w", &[2, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&s, &path).unwrap();
        let mut other = ParamStore::new();
        other.zeros("w", &[4, 1]);
        assert!(matches!(load_checkpoint(&mut other, &path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_checkpoint(b"not a checkpoint", Path::new("x")).is_err());
    }
}
