//! Checkpoint format: a directory holding `manifest.json` and `tensors.bin`.
//!
//! The manifest lists every tensor sorted by name with its shape, byte
//! offset, byte length and role tag, plus run metadata (config echo, epoch,
//! seed, and the hash of the domain registry the run was trained against).
//! `tensors.bin` is the raw little-endian `f32` data concatenated in
//! manifest order, so a record can be memory-mapped or sliced without
//! parsing anything else.
//!
//! Writes are canonical: the same store and metadata produce byte-identical
//! files, which makes bit-reproducibility testable end to end.  The registry
//! hash lets a transfer run refuse a checkpoint trained against different
//! label spaces, and tags let the export step strip everything but the
//! deployed core and heads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SstError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

/// Run metadata embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Echo of the run's configuration (opaque here).
    pub config: serde_json::Value,
    /// Completed epochs at the time of writing.
    pub epoch: usize,
    pub seed: u64,
    /// [`crate::domain::DomainRegistry::hash`] of the training registry.
    pub registry_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `tensors.bin`.
    offset: u64,
    byte_len: u64,
    tag: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Write `store` and `meta` into `dir` (created if missing).
pub fn save_checkpoint(dir: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SstError::io(dir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    for (name, e) in store.iter() {
        let offset = blob.len() as u64;
        for v in e.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: e.tensor.shape().to_vec(),
            offset,
            byte_len: blob.len() as u64 - offset,
            tag: e.tag.clone(),
        });
    }
    let manifest = CheckpointManifest {
        metadata: meta.clone(),
        tensors: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    text.push('\n');
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| SstError::io(&mpath, e))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, blob).map_err(|e| SstError::io(&tpath, e))?;
    Ok(())
}

/// Load a checkpoint directory back into a store (all entries trainable).
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| SstError::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| SstError::format(&mpath, format!("checkpoint manifest JSON: {e}")))?;
    let tpath = dir.join(TENSORS_FILE);
    let blob = fs::read(&tpath).map_err(|e| SstError::io(&tpath, e))?;

    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        if t.byte_len as usize != numel * 4 {
            return Err(SstError::Checkpoint(format!(
                "tensor '{}': byte length {} does not match shape {:?}",
                t.name, t.byte_len, t.shape
            )));
        }
        let start = t.offset as usize;
        let end = start + t.byte_len as usize;
        if end > blob.len() {
            return Err(SstError::Checkpoint(format!(
                "tensor '{}': range {start}..{end} exceeds {} ({} bytes)",
                t.name,
                TENSORS_FILE,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if store.contains(&t.name) {
            return Err(SstError::Checkpoint(format!(
                "duplicate tensor '{}' in manifest",
                t.name
            )));
        }
        store.insert(&t.name, &t.tag, Tensor::from_vec(&t.shape, data));
    }
    Ok((store, manifest.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut s = ParamStore::new();
        let mut add = |name: &str, tag: &str, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            s.insert(name, tag, Tensor::from_vec(shape, data));
        };
        add("core.stem.w", "core", &[4, 3, 3, 3]);
        add("head.fine.w", "head:fine", &[12, 4]);
        add("msa.ws", "msa", &[8, 4]);
        add("mse.fine.x0", "mse:fine", &[12, 4]);
        s
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config: serde_json::json!({"epochs": 3, "dim": 4}),
            epoch: 3,
            seed: 99,
            registry_hash: "abc123".into(),
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        save_checkpoint(dir.path(), &store, &meta()).unwrap();
        let (loaded, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded.len(), store.len());
        for (name, e) in store.iter() {
            let l = loaded.entry(name);
            assert_eq!(l.tag, e.tag, "{name}");
            assert_eq!(l.tensor, e.tensor, "{name}");
            assert!(l.trainable);
        }
    }

    #[test]
    fn writes_are_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let store = sample_store();
        save_checkpoint(d1.path(), &store, &meta()).unwrap();
        // Save a loaded copy: still identical.
        let (loaded, m) = load_checkpoint(d1.path()).unwrap();
        save_checkpoint(d2.path(), &loaded, &m).unwrap();
        for f in [MANIFEST_FILE, TENSORS_FILE] {
            let a = fs::read(d1.path().join(f)).unwrap();
            let b = fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn tensors_are_sorted_and_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_store(), &meta()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let manifest: CheckpointManifest = serde_json::from_str(&text).unwrap();
        let names: Vec<_> = manifest.tensors.iter().map(|t| t.name.clone()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let mut expect_offset = 0u64;
        for t in &manifest.tensors {
            assert_eq!(t.offset, expect_offset, "{}", t.name);
            expect_offset += t.byte_len;
        }
        let blob = fs::read(dir.path().join(TENSORS_FILE)).unwrap();
        assert_eq!(blob.len() as u64, expect_offset);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_store(), &meta()).unwrap();
        let tpath = dir.path().join(TENSORS_FILE);
        let blob = fs::read(&tpath).unwrap();
        fs::write(&tpath, &blob[..blob.len() - 4]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, SstError::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("exceeds"), "{err}");
    }

    #[test]
    fn shape_length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_store(), &meta()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        let mut manifest: CheckpointManifest = serde_json::from_str(&text).unwrap();
        manifest.tensors[0].shape[0] += 1;
        fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("does not match shape"), "{err}");
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, SstError::Io { .. }), "{err}");
    }
}
