//! Flat binary weight files.
//!
//! Layout (little-endian): magic `RLWB`, `u32` version (1), `u32` entry
//! count, then per entry: `u8` kind (0 = parameter, 1 = buffer), `u32` name
//! length, UTF-8 name, `u32` rank, `rank × u64` dims, `f32` data.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RLWB";
const VERSION: u32 = 1;

fn write_entry(out: &mut impl Write, kind: u8, name: &str, t: &Tensor) -> std::io::Result<()> {
    out.write_all(&[kind])?;
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let count = store.params().len() + store.buffers().len();
        out.write_all(&(count as u32).to_le_bytes())?;
        for p in store.params() {
            write_entry(out, 0, &p.name, &p.value)?;
        }
        for b in store.buffers() {
            write_entry(out, 1, &b.name, &b.value)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Reads every entry of a weight file keyed by name.
pub fn read_weights(path: &Path) -> Result<HashMap<String, Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    r.read_exact(&mut word).map_err(io)?;
    let count = u32::from_le_bytes(word);
    let mut out = HashMap::new();
    for _ in 0..count {
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind).map_err(io)?;
        r.read_exact(&mut word).map_err(io)?;
        let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| Error::Header("weight name is not UTF-8".into()))?;
        r.read_exact(&mut word).map_err(io)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 8];
            r.read_exact(&mut d).map_err(io)?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(out)
}

/// Copies matching entries into `store`. With `strict`, every parameter and
/// buffer must be present with the right shape; otherwise entries that are
/// missing or mis-shaped are skipped. Returns the number of tensors loaded.
pub fn load_weights(store: &mut ParamStore, path: &Path, strict: bool) -> Result<usize> {
    let weights = read_weights(path)?;
    let mut loaded = 0;
    for p in store.params_mut() {
        match weights.get(&p.name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t.clone();
                loaded += 1;
            }
            Some(t) if strict => {
                return Err(Error::Shape(format!(
                    "weight {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            None if strict => return Err(Error::MissingArtifact(format!("weight {} not in {}", p.name, path.display()))),
            _ => {}
        }
    }
    for b in store.buffers_mut() {
        match weights.get(&b.name) {
            Some(t) if t.shape() == b.value.shape() => {
                b.value = t.clone();
                loaded += 1;
            }
            _ if strict => {
                return Err(Error::MissingArtifact(format!("buffer {} not loadable from {}", b.name, path.display())))
            }
            _ => {}
        }
    }
    Ok(loaded)
}
