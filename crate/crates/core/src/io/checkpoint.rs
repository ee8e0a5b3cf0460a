//! Checkpoint container: `MFCKPT01`, a little-endian `u64` manifest length,
//! the JSON manifest, then one little-endian `f32` blob per tensor in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{GroupName, ParamGroup, Tensor};
use crate::error::{Error, Result};
use crate::fields::{MaterialHooks, ModelConfig, SceneModel};

pub const MAGIC: &[u8; 8] = b"MFCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: GroupName,
    pub index: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub config_hash: String,
    pub iteration: u64,
    pub hooks: MaterialHooks,
    pub trainable: Vec<GroupName>,
    /// Training configuration, recorded verbatim.
    pub train: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SceneModel,
    pub iteration: u64,
    pub train: serde_json::Value,
}

/// Hex sha256 of the model configuration's JSON form.
pub fn config_hash(config: &ModelConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let model = &ck.model;
    let manifest = Manifest {
        config: model.config.clone(),
        config_hash: config_hash(&model.config),
        iteration: ck.iteration,
        hooks: model.hooks,
        trainable: model.groups().iter().filter(|g| g.trainable).map(|g| g.name).collect(),
        train: ck.train.clone(),
        tensors: model
            .groups()
            .iter()
            .flat_map(|g| g.tensors.iter().enumerate().map(|(index, t)| TensorEntry { group: g.name, index, shape: t.shape().to_vec() }))
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.groups().iter().map(|g| 4 * g.numel()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for g in model.groups() {
        for t in &g.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// How strictly the stored configuration hash is checked on load.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Hash the caller expects (from its own configuration).
    pub expected_hash: Option<String>,
    /// Downgrade hash mismatches to a warning.
    pub allow_config_mismatch: bool,
}

pub fn decode_checkpoint(bytes: &[u8], opts: &LoadOptions) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing MFCKPT01 header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;

    let actual = config_hash(&manifest.config);
    let check = |expected: &str| -> Result<()> {
        if expected != actual {
            if opts.allow_config_mismatch {
                log::warn!("checkpoint config hash {actual} differs from {expected}; continuing");
            } else {
                return Err(Error::ConfigHashMismatch { expected: expected.to_string(), found: actual.clone() });
            }
        }
        Ok(())
    };
    check(&manifest.config_hash)?;
    if let Some(e) = &opts.expected_hash {
        check(e)?;
    }

    let mut at = 16 + len;
    let mut groups: Vec<ParamGroup> = Vec::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let blob = bytes.get(at..at + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        at += 4 * n;
        let data: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {}[{}]", entry.group, entry.index)));
        }
        let t = Tensor::new(entry.shape.clone(), data)?;
        match groups.iter_mut().find(|g| g.name == entry.group) {
            Some(g) => {
                if g.tensors.len() != entry.index {
                    return Err(bad("tensors out of order"));
                }
                g.tensors.push(t);
            }
            None => groups.push(ParamGroup::new(entry.group, vec![t])),
        }
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    for g in &mut groups {
        g.trainable = manifest.trainable.contains(&g.name);
    }
    let mut model = SceneModel::from_groups(manifest.config, groups)?;
    model.hooks = manifest.hooks;
    Ok(Checkpoint { model, iteration: manifest.iteration, train: manifest.train })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, opts: &LoadOptions) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Aabb;

    fn config() -> ModelConfig {
        ModelConfig {
            bbox: Aabb::cube(1.0),
            density_resolution: [5; 3],
            density_rank: 2,
            appearance_resolution: [4; 3],
            appearance_rank: 2,
            head_hidden: vec![4],
            specular_hidden: vec![4],
            env_height: 2,
            env_width: 4,
            ..ModelConfig::desk()
        }
    }

    fn sample() -> Checkpoint {
        let mut model = SceneModel::init(config(), 8);
        model.hooks.roughness = Some(0.1);
        model.set_trainable(Some(GroupName::F0));
        Checkpoint { model, iteration: 42, train: serde_json::json!({ "iterations": 42, "lr": 0.02 }) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck), &LoadOptions::default()).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(back.train, ck.train);
        assert_eq!(back.model.hooks, ck.model.hooks);
        for (a, b) in ck.model.groups().iter().zip(back.model.groups()) {
            assert!(a.bit_eq(b));
            assert_eq!(a.trainable, b.trainable);
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&a, &sample()).unwrap();
        let loaded = load_checkpoint(&a, &LoadOptions::default()).unwrap();
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn hash_mismatch_is_an_overridable_error() {
        let bytes = encode_checkpoint(&sample());
        let other = config_hash(&ModelConfig::desk());
        let strict = LoadOptions { expected_hash: Some(other.clone()), allow_config_mismatch: false };
        assert!(matches!(decode_checkpoint(&bytes, &strict), Err(Error::ConfigHashMismatch { .. })));
        let lax = LoadOptions { expected_hash: Some(other), allow_config_mismatch: true };
        assert!(decode_checkpoint(&bytes, &lax).is_ok());
        let right = LoadOptions { expected_hash: Some(config_hash(&config())), allow_config_mismatch: false };
        assert!(decode_checkpoint(&bytes, &right).is_ok());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4], &LoadOptions::default()).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, &LoadOptions::default()).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic, &LoadOptions::default()).is_err());
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_checkpoint(&nan, &LoadOptions::default()), Err(Error::NonFinite(_))));
    }
}
