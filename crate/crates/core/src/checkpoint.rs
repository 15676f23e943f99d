//! Checkpoint files: a UTF-8 JSON header line (schema version, tensor names,
//! shapes, byte offsets, free-form metadata) followed by a little-endian fp64
//! payload. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in store.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len(),
        });
        offset += (tensor.len() * 8) as u64;
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        metadata: metadata.clone(),
        tensors: entries,
    };
    let ctx = || format!("writing checkpoint {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| CoreError::io(ctx(), e))?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(|e| CoreError::io(ctx(), e))?;
    for (_, tensor) in store.iter() {
        for v in tensor.values() {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| CoreError::io(ctx(), e))?;
        }
    }
    w.flush().map_err(|e| CoreError::io(ctx(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let ctx = || format!("reading checkpoint {}", path.display());
    let mut r = BufReader::new(File::open(path).map_err(|e| CoreError::io(ctx(), e))?);

    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|e| CoreError::io(ctx(), e))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported schema version {} (expected {})",
            header.schema_version, SCHEMA_VERSION
        )));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| CoreError::io(ctx(), e))?;

    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let end = start + entry.len * 8;
        if end > payload.len() {
            return Err(CoreError::Checkpoint(format!(
                "tensor {} extends past payload ({} > {})",
                entry.name,
                end,
                payload.len()
            )));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_values(&entry.shape, values).map_err(|_| {
            CoreError::Checkpoint(format!(
                "tensor {} shape {:?} does not match {} values",
                entry.name, entry.shape, entry.len
            ))
        })?;
        store.insert(entry.name.clone(), tensor);
    }
    Ok((store, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert(
            "shared.conv1.w",
            Tensor::from_values(&[2, 3], vec![1.5, -0.25, 1e-300, f64::MAX, 0.1, -0.0]).unwrap(),
        );
        store.insert("det.fc.b", Tensor::scalar(std::f64::consts::PI));
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "joint".to_string());

        save_checkpoint(&path, &store, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();

        assert_eq!(meta2.get("stage").map(String::as_str), Some("joint"));
        assert_eq!(loaded.len(), store.len());
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            let a: Vec<u64> = t.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = l.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[8]));
        save_checkpoint(&path, &store, &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
