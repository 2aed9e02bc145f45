//! Checkpoints: a JSON manifest (names, shapes, dtype, seed, config,
//! blob digest) next to a raw little-endian f64 parameter blob. Round
//! trips are bit-exact; the blob digest doubles as the freeze check.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcheck::ParamStore;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub blob_len: usize,
    pub blob_sha256: String,
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("json")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("bin")
}

fn blob_bytes(store: &ParamStore) -> Result<(Vec<u8>, Vec<ParamEntry>)> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for name in store.names() {
        let t = store.get(name)?;
        entries.push(ParamEntry { name: name.clone(), rows: t.rows, cols: t.cols, offset });
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.data.len();
    }
    Ok((bytes, entries))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Write `<prefix>.json` and `<prefix>.bin`.
pub fn save(prefix: &Path, config: &impl Serialize, seed: u64, store: &ParamStore) -> Result<()> {
    let (bytes, params) = blob_bytes(store)?;
    let manifest = Manifest {
        version: 1,
        dtype: "f64le".to_string(),
        seed,
        config: serde_json::to_value(config)?,
        params,
        blob_len: bytes.len() / 8,
        blob_sha256: sha256_hex(&bytes),
    };
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(blob_path(prefix), &bytes)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(manifest_path(prefix), json)?;
    Ok(())
}

/// Read a checkpoint back; verifies the blob digest and every shape.
pub fn load(prefix: &Path) -> Result<(Manifest, ParamStore)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(prefix))?)?;
    let bytes = std::fs::read(blob_path(prefix))?;
    if bytes.len() != manifest.blob_len * 8 {
        return Err(Error::Numeric(format!(
            "blob is {} bytes, manifest says {}",
            bytes.len(),
            manifest.blob_len * 8
        )));
    }
    if sha256_hex(&bytes) != manifest.blob_sha256 {
        return Err(Error::Numeric("checkpoint blob digest mismatch".into()));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let len = entry.rows * entry.cols;
        let start = entry.offset * 8;
        let end = start + len * 8;
        if end > bytes.len() {
            return Err(Error::Numeric(format!("parameter {} overruns blob", entry.name)));
        }
        let data: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(&entry.name, Tensor2D::from_vec(entry.rows, entry.cols, data))?;
    }
    Ok((manifest, store))
}

/// Digest of the store's serialized blob without touching disk.
pub fn store_digest(store: &ParamStore) -> Result<String> {
    let (bytes, _) = blob_bytes(store)?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("src_kit_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("model");

        let mut rng = DetRng::from_seed(3);
        let mut store = ParamStore::new();
        store.insert("w1", Tensor2D::from_vec(3, 4, rng.normal_vec(12, 1.0))).unwrap();
        store.insert("b", Tensor2D::from_vec(1, 4, rng.normal_vec(4, 1.0))).unwrap();

        #[derive(Serialize)]
        struct Cfg {
            dim: usize,
        }
        save(&prefix, &Cfg { dim: 4 }, 9, &store).unwrap();
        let (manifest, loaded) = load(&prefix).unwrap();
        assert_eq!(manifest.seed, 9);
        assert_eq!(manifest.dtype, "f64le");
        assert_eq!(loaded.names(), store.names());
        for name in store.names() {
            assert_eq!(
                store.get(name).unwrap().data,
                loaded.get(name).unwrap().data,
                "{name} must round trip exactly"
            );
        }
        assert_eq!(store_digest(&store).unwrap(), manifest.blob_sha256);

        // Saving the loaded store reproduces identical files.
        let prefix2 = dir.join("model2");
        save(&prefix2, &Cfg { dim: 4 }, 9, &loaded).unwrap();
        assert_eq!(
            std::fs::read(blob_path(&prefix)).unwrap(),
            std::fs::read(blob_path(&prefix2)).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = std::env::temp_dir().join("src_kit_ckpt_corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("model");
        let mut store = ParamStore::new();
        store.insert("w", Tensor2D::from_vec(1, 2, vec![1.0, 2.0])).unwrap();
        save(&prefix, &serde_json::json!({}), 0, &store).unwrap();
        let mut bytes = std::fs::read(blob_path(&prefix)).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(blob_path(&prefix), &bytes).unwrap();
        assert!(matches!(load(&prefix), Err(Error::Numeric(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
