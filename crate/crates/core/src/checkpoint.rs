//! Single-file checkpoint archive: a JSON manifest (name, shape, dtype,
//! trainable flag, schedule fingerprint, free-form metadata) followed by raw
//! little-endian f64 tensor payloads in manifest order. Writes are
//! deterministic: tensors are ordered by name.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LATSEGCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    schedule_fingerprint: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// FNV-1a over the raw f64 bytes of a table; used to pin the noise schedule a
/// checkpoint was produced with.
pub fn table_fingerprint(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

pub fn save(
    path: &Path,
    store: &ParameterStore,
    schedule_fingerprint: &str,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let tensors: Vec<TensorEntry> = store
        .iter()
        .map(|(name, p)| TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".to_string(),
            trainable: p.trainable,
        })
        .collect();
    let manifest = Manifest {
        version: VERSION,
        schedule_fingerprint: schedule_fingerprint.to_string(),
        meta: meta.clone(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub struct Loaded {
    pub store: ParameterStore,
    pub schedule_fingerprint: String,
    pub meta: BTreeMap<String, String>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let mlen = u64::from_le_bytes(buf8) as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)?;
    let manifest: Manifest = serde_json::from_slice(&mjson)?;

    let mut store = ParameterStore::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; numel];
        for v in data.iter_mut() {
            f.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        store.insert(
            entry.name.clone(),
            Tensor::new(&entry.shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?,
            entry.trainable,
        );
    }
    Ok(Loaded {
        store,
        schedule_fingerprint: manifest.schedule_fingerprint,
        meta: manifest.meta,
    })
}
