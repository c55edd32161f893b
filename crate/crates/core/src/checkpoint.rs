//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TVTCKPT1"
//! u32 entry count
//! per entry: u32 name length, name bytes (UTF-8), u8 dtype (0 = f64, 1 = f32),
//!            u32 rank, rank x u64 extents
//! per entry, in manifest order: raw array values
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"TVTCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode(store: &ParamStore, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(store.len() as u32).unwrap();
    for (_, name, t) in store.iter() {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u8(dtype.code()).unwrap();
        out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
    }
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            match dtype {
                DType::F64 => out.write_f64::<LittleEndian>(v).unwrap(),
                DType::F32 => out.write_f32::<LittleEndian>(v as f32).unwrap(),
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<Entry>, String> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| "file too short for magic".to_string())?;
    if &magic != MAGIC {
        return Err(format!("bad magic {:?}", String::from_utf8_lossy(&magic)));
    }
    let truncated = |_| "truncated manifest".to_string();
    let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut name = vec![0u8; len.min(bytes.len())];
        cur.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| "parameter name is not UTF-8".to_string())?;
        let code = cur.read_u8().map_err(truncated)?;
        let dtype = DType::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
        let rank = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.read_u64::<LittleEndian>().map_err(truncated)? as usize);
        }
        entries.push(Entry {
            name,
            dtype,
            shape,
            values: Vec::new(),
        });
    }
    for e in &mut entries {
        let n: usize = e.shape.iter().product();
        let width = match e.dtype {
            DType::F64 => 8,
            DType::F32 => 4,
        };
        let remaining = bytes.len() - cur.position() as usize;
        if n.saturating_mul(width) > remaining {
            return Err(format!("truncated data for {}", e.name));
        }
        e.values = (0..n)
            .map(|_| match e.dtype {
                DType::F64 => cur.read_f64::<LittleEndian>().unwrap(),
                DType::F32 => cur.read_f32::<LittleEndian>().unwrap() as f64,
            })
            .collect();
    }
    if (cur.position() as usize) != bytes.len() {
        return Err("trailing bytes after data".to_string());
    }
    Ok(entries)
}

pub fn save(path: &Path, store: &ParamStore, dtype: DType) -> Result<()> {
    std::fs::write(path, encode(store, dtype)).map_err(|e| Error::io(path, e))
}

/// Loads values into a copy of `template`, which fixes the expected names and
/// shapes (normally a freshly initialized model for the same configuration).
pub fn load(path: &Path, template: &ParamStore) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        reason,
    };
    let entries = decode(&bytes).map_err(bad)?;
    restore(template, entries).map_err(bad)
}

pub fn restore(template: &ParamStore, entries: Vec<Entry>) -> std::result::Result<ParamStore, String> {
    if entries.len() != template.len() {
        return Err(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            template.len()
        ));
    }
    let mut store = template.clone();
    for e in entries {
        let id = store
            .id(&e.name)
            .ok_or_else(|| format!("unexpected tensor {}", e.name))?;
        let expected = store.tensor(id).shape();
        if expected != e.shape.as_slice() {
            return Err(format!(
                "shape mismatch for {}: checkpoint {:?}, model {:?}",
                e.name, e.shape, expected
            ));
        }
        let t = store.tensor_mut(id);
        t.data_mut().copy_from_slice(&e.values);
        t.zero_grad();
    }
    Ok(store)
}
