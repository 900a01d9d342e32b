//! Checkpoint directory: `manifest.json` plus `params.bin`, a concatenation
//! of little-endian f32 arrays in parameter-name order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::model::C2Crs;
use crate::{Error, Result};

pub const FORMAT: &str = "c2crs-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length in the blob.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: TrainConfig,
    /// Last stage that produced these parameters, if any.
    pub stage: Option<String>,
    pub step: usize,
    pub data_dir: Option<PathBuf>,
    pub vocab_size: usize,
    pub params: Vec<ParamEntry>,
}

/// Parameters read from a checkpoint, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Where the current parameters came from.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub stage: Option<String>,
    pub step: usize,
    pub data_dir: Option<PathBuf>,
}

pub fn save_checkpoint(model: &C2Crs, config: &TrainConfig, meta: &CheckpointMeta, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::with_capacity(model.params().total_elements() * 4);
    let mut entries = Vec::with_capacity(model.params().len());
    for (name, var) in model.params().iter() {
        let values: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let offset = blob.len() as u64;
        for v in &values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: var.dims().to_vec(),
            dtype: "f32".into(),
            offset,
            length: (values.len() * 4) as u64,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: config.clone(),
        stage: meta.stage.clone(),
        step: meta.step,
        data_dir: meta.data_dir.clone(),
        vocab_size: model.vocab_size(),
        params: entries,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(BLOB_FILE);
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected: u64 = manifest.params.iter().map(|p| p.length).sum();
    if expected != blob.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "blob length mismatch: manifest describes {expected} bytes, {} has {}",
            blob_path.display(),
            blob.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::Checkpoint(format!("parameter {} listed twice", p.name)));
        }
        if p.dtype != "f32" {
            return Err(Error::Checkpoint(format!("parameter {} has unsupported dtype {}", p.name, p.dtype)));
        }
        let n: usize = p.shape.iter().product();
        if p.length != (n * 4) as u64 {
            return Err(Error::Checkpoint(format!(
                "parameter {} shape {:?} needs {} bytes, manifest says {}",
                p.name,
                p.shape,
                n * 4,
                p.length
            )));
        }
        let end = p.offset.checked_add(p.length).filter(|&e| e <= blob.len() as u64).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {} extends past the end of the blob", p.name))
        })?;
        let bytes = &blob[p.offset as usize..end as usize];
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((p.name.clone(), p.shape.clone(), values));
    }
    Ok(Checkpoint { manifest, tensors })
}

/// Copies checkpoint values into `model`. Every model parameter must be
/// present and no unknown parameter may appear.
pub fn restore(model: &C2Crs, checkpoint: &Checkpoint) -> Result<()> {
    let have: BTreeSet<&str> = checkpoint.tensors.iter().map(|t| t.0.as_str()).collect();
    if let Some(missing) = model.params().names().find(|n| !have.contains(n)) {
        return Err(Error::Checkpoint(format!("parameter {missing} missing from checkpoint")));
    }
    if checkpoint.manifest.vocab_size != model.vocab_size() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary has {} tokens, corpus has {}",
            checkpoint.manifest.vocab_size,
            model.vocab_size()
        )));
    }
    let device = model.params().device().clone();
    for (name, shape, values) in &checkpoint.tensors {
        if model.params().get(name).is_none() {
            return Err(Error::Checkpoint(format!("checkpoint parameter {name} is not part of the model")));
        }
        let t = Tensor::from_vec(values.clone(), shape.as_slice(), &device)?;
        model.params().assign(name, &t)?;
    }
    Ok(())
}

/// Builds a model for `corpus` from the checkpoint's config and fills it
/// with the stored parameters.
pub fn model_from_checkpoint(dir: &Path, corpus: &crate::corpus::Corpus) -> Result<(C2Crs, Manifest)> {
    let ck = load_checkpoint(dir)?;
    let model = C2Crs::new(&ck.manifest.config.model, corpus, DType::F32, ck.manifest.config.train.seed)?;
    restore(&model, &ck)?;
    Ok((model, ck.manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthSpec};

    fn model() -> (C2Crs, TrainConfig) {
        let corpus = generate_synthetic_corpus(SynthSpec {
            n_items: 4,
            n_entities: 8,
            n_conversations: 4,
            seed: 3,
        })
        .unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.model = crate::config::ModelConfig::tiny();
        (C2Crs::new(&cfg.model, &corpus, DType::F32, 5).unwrap(), cfg)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (m, cfg) = model();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_checkpoint(&m, &cfg, &CheckpointMeta::default(), a.path()).unwrap();
        let ck = load_checkpoint(a.path()).unwrap();
        restore(&m, &ck).unwrap();
        save_checkpoint(&m, &cfg, &CheckpointMeta::default(), b.path()).unwrap();
        for f in [BLOB_FILE, MANIFEST_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let (m, cfg) = model();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&m, &cfg, &CheckpointMeta::default(), d.path()).unwrap();
        let path = d.path().join(BLOB_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(d.path()).unwrap_err().to_string();
        assert!(err.contains("blob length mismatch"), "{err}");
    }

    #[test]
    fn missing_parameter_is_named() {
        let (m, cfg) = model();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&m, &cfg, &CheckpointMeta::default(), d.path()).unwrap();
        let mut ck = load_checkpoint(d.path()).unwrap();
        let removed = ck.tensors.remove(3).0;
        let err = restore(&m, &ck).unwrap_err().to_string();
        assert!(err.contains(&removed), "{err}");
    }
}
