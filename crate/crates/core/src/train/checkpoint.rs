//! Checkpoint directory: `manifest.json` plus `tensors.bin`, a raw
//! little-endian f64 blob holding the parameters followed by the Adam
//! moments (`adam.m.<name>`, `adam.v.<name>`).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{ParamSet, Tensor};

pub const FORMAT: &str = "dualguide-checkpoint/1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: usize,
    pub seed: u64,
    pub rng: RngState,
    pub replaced: u64,
    pub seen: u64,
    pub running_loss_sum: f64,
    pub running_loss_count: usize,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub blob_sha256: String,
}

pub struct Checkpoint {
    pub params: ModelParams,
    pub state: TrainState,
    pub train_config: TrainConfig,
    pub manifest: Manifest,
}

pub fn save_checkpoint(params: &ModelParams, state: &TrainState, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (_, p) in params.set.iter() {
        named.push((p.name.clone(), p.value()));
    }
    for (prefix, moments) in [("adam.m.", &state.optimizer.m), ("adam.v.", &state.optimizer.v)] {
        for ((_, p), t) in params.set.iter().zip(moments) {
            named.push((format!("{prefix}{}", p.name), t));
        }
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.numel(),
        });
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        model_config: params.config.clone(),
        train_config: cfg.clone(),
        step: state.step,
        seed: cfg.seed,
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        replaced: state.replaced,
        seen: state.seen,
        running_loss_sum: state.running_loss.0,
        running_loss_count: state.running_loss.1,
        tensors,
        blob_bytes: blob.len(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::io(&manifest_path, e.into()))?;
    json.push(b'\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", manifest_path.display())))?;
    load_with_manifest(dir, manifest, None)
}

/// As [`load_checkpoint`], but every tensor must match the shapes implied
/// by `expected`.
pub fn load_checkpoint_expecting(dir: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", manifest_path.display())))?;
    load_with_manifest(dir, manifest, Some(expected))
}

fn load_with_manifest(dir: &Path, manifest: Manifest, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if manifest.format != FORMAT {
        return Err(Error::Integrity(format!("unknown format `{}`", manifest.format)));
    }
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Integrity(format!(
            "blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Integrity("blob checksum mismatch".into()));
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let end = e.len.checked_mul(8).and_then(|n| n.checked_add(e.offset));
        let in_range = end.is_some_and(|end| end <= blob.len());
        if !in_range || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Integrity(format!("tensor `{}` has an inconsistent extent", e.name)));
        }
        let data = blob[e.offset..e.offset + 8 * e.len]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    if tensors.len() % 3 != 0 {
        return Err(Error::Integrity(format!("{} tensors cannot split into params and moments", tensors.len())));
    }
    let n = tensors.len() / 3;
    let mut moments = tensors.split_off(n);
    let v_part = moments.split_off(n);
    let mut set = ParamSet::new();
    for (name, t) in tensors {
        set.add(name, t);
    }
    let mut optimizer = AdamW { m: Vec::new(), v: Vec::new() };
    for (prefix, part, out) in [("adam.m.", moments, &mut optimizer.m), ("adam.v.", v_part, &mut optimizer.v)] {
        for ((name, t), (_, p)) in part.into_iter().zip(set.iter()) {
            if name != format!("{prefix}{}", p.name) {
                return Err(Error::Integrity(format!("unexpected tensor `{name}`")));
            }
            if t.shape() != p.value().shape() {
                return Err(Error::ShapeConflict {
                    name,
                    expected: p.value().shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            out.push(t);
        }
    }

    let config = expected.cloned().unwrap_or_else(|| manifest.model_config.clone());
    let params = ModelParams::from_set(config, set)?;
    let seed_bytes: [u8; 32] = hex::decode(&manifest.rng.seed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Integrity("malformed rng seed".into()))?;
    let word_pos: u128 =
        manifest.rng.word_pos.parse().map_err(|_| Error::Integrity("malformed rng word position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(word_pos);
    let state = TrainState {
        step: manifest.step,
        optimizer,
        rng,
        replaced: manifest.replaced,
        seen: manifest.seen,
        running_loss: (manifest.running_loss_sum, manifest.running_loss_count),
    };
    Ok(Checkpoint {
        params,
        state,
        train_config: manifest.train_config.clone(),
        manifest,
    })
}
