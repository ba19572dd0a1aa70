//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RGTM" | version: u32 | role_len: u32 | role: utf8 | count: u32
//! count x ( name_len: u32 | name: utf8 | rank: u32 | dims: u32 x rank | values: f32 x prod(dims) )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub const MAGIC: &[u8; 4] = b"RGTM";
pub const FORMAT_VERSION: u32 = 1;

/// Decoded checkpoint: a role tag plus ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(role: &str, store: &ParamStore) -> Self {
        Self {
            role: role.to_string(),
            params: store.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copies values into an already-built store with matching names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(NnError::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| NnError::Format(format!("unexpected parameter `{name}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(NnError::Format(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    store.get(id).shape(),
                    t.shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_checkpoint(&mut BufReader::new(File::open(path)?))
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_len(w: &mut impl Write, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| NnError::Format(format!("length {n} exceeds u32")))?;
    put_u32(w, v)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_string(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NnError::Format(format!("invalid utf-8: {e}")))
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    put_len(w, ckpt.role.len())?;
    w.write_all(ckpt.role.as_bytes())?;
    put_len(w, ckpt.params.len())?;
    for (name, t) in &ckpt.params {
        put_len(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_len(w, t.shape().len())?;
        for &d in t.shape() {
            put_len(w, d)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("bad magic bytes".into()));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(NnError::Format(format!("unsupported format version {version}")));
    }
    let role = get_string(r)?;
    let count = get_u32(r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = get_string(r)?;
        let rank = get_u32(r)? as usize;
        let dims = (0..rank)
            .map(|_| get_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, Tensor::from_vec(&dims, data)?));
    }
    Ok(Checkpoint { role, params })
}
