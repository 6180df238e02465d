//! Checkpoint format: a flat little-endian `f64` binary of named tensors plus
//! a JSON manifest mapping each name to its shape and byte offset.

use crate::{NdArray, ParamStore, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint data truncated: tensor {name} wants {want} bytes at offset {offset}, file has {have}")]
    Truncated { name: String, want: usize, offset: usize, have: usize },
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    offset: usize,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: BTreeMap<String, TensorEntry>,
}

const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "flat-f64-le/1";

/// Write `store` into `dir` as `manifest.json` + `weights.bin`.
pub fn save_params<T: Scalar>(store: &ParamStore<T>, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, param) in store.iter() {
        let offset = blob.len();
        for &x in param.value.data() {
            blob.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        tensors.insert(name.clone(), TensorEntry { shape: param.value.shape().to_vec(), offset, frozen: param.frozen });
    }
    let manifest = Manifest { format: FORMAT.to_string(), tensors };
    let mut mf = fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

/// Read a checkpoint directory back into a parameter store.
pub fn load_params<T: Scalar>(dir: &Path) -> Result<ParamStore<T>, CheckpointError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut store = ParamStore::new();
    for (name, entry) in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let want = n * 8;
        if entry.offset + want > blob.len() {
            return Err(CheckpointError::Truncated { name: name.clone(), want, offset: entry.offset, have: blob.len() });
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = entry.offset + i * 8;
            let bits: [u8; 8] = blob[off..off + 8].try_into().unwrap();
            data.push(T::from_f64_c(f64::from_le_bytes(bits)));
        }
        let arr = NdArray::from_vec(&entry.shape, data);
        if entry.frozen {
            store.insert_frozen(name, arr);
        } else {
            store.insert(name, arr);
        }
    }
    Ok(store)
}
