//! On-disk checkpoints: `checkpoint.json` (manifest) next to
//! `checkpoint.bin` (all tensors as little-endian f64, back to back).

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::error::{MuseError, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::Rng;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.json";
const BLOB: &str = "checkpoint.bin";

/// Enough to rebuild a training generator at the same position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = |reason: &str| MuseError::Checkpoint {
            entry: "rng_state".into(),
            reason: reason.into(),
        };
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: Vec<TensorEntry>,
    config: RunConfig,
    rng_state: RngState,
    config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub rng_state: RngState,
}

/// SHA-256 of the model-defining configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Writes both files through temporaries so a crash never leaves a mixed pair.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(ckpt.params.numel() * 8);
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    for (name, t) in ckpt.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors,
        config: ckpt.config.clone(),
        rng_state: ckpt.rng_state.clone(),
        config_hash: config_hash(&ckpt.config.model()),
    };
    let blob_tmp = dir.join(format!("{BLOB}.tmp"));
    let manifest_tmp = dir.join(format!("{MANIFEST}.tmp"));
    std::fs::write(&blob_tmp, &blob)?;
    std::fs::write(&manifest_tmp, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::rename(blob_tmp, dir.join(BLOB))?;
    std::fs::rename(manifest_tmp, dir.join(MANIFEST))?;
    Ok(())
}

/// Loads and validates a checkpoint. If `expected` is given and its hash
/// differs from the stored one, loading is refused unless `force` is set.
pub fn load_checkpoint(
    dir: &Path,
    expected: Option<&ModelConfig>,
    force: bool,
) -> Result<Checkpoint> {
    let bad = |entry: &str, reason: String| MuseError::Checkpoint {
        entry: entry.to_string(),
        reason,
    };
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| bad("manifest", format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(
            "format_version",
            format!(
                "expected {FORMAT_VERSION}, found {}",
                manifest.format_version
            ),
        ));
    }
    let stored_hash = config_hash(&manifest.config.model());
    if stored_hash != manifest.config_hash {
        return Err(bad(
            "config_hash",
            "does not match the stored config".into(),
        ));
    }
    if let Some(cfg) = expected {
        let want = config_hash(cfg);
        if want != stored_hash {
            log::warn!("checkpoint config hash {stored_hash} differs from expected {want}");
            if !force {
                return Err(bad(
                    "config_hash",
                    format!(
                        "checkpoint {stored_hash} vs expected {want}; pass force to load anyway"
                    ),
                ));
            }
        }
    }

    let blob = std::fs::read(dir.join(BLOB))?;
    let mut params = ParamStore::new();
    let mut expected_end = 0u64;
    for entry in &manifest.tensors {
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &s| acc.checked_mul(s as u64))
            .ok_or_else(|| bad(&entry.name, "shape overflows".into()))?;
        let end = numel
            .checked_mul(8)
            .and_then(|bytes| entry.offset.checked_add(bytes))
            .ok_or_else(|| bad(&entry.name, "offset overflows".into()))?;
        if entry.offset != expected_end {
            return Err(bad(
                &entry.name,
                format!(
                    "offset {} but previous tensor ended at {expected_end}",
                    entry.offset
                ),
            ));
        }
        if end > blob.len() as u64 {
            return Err(bad(
                &entry.name,
                format!(
                    "needs bytes {}..{end} but blob holds {}",
                    entry.offset,
                    blob.len()
                ),
            ));
        }
        let data = blob[entry.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        expected_end = end;
    }
    if expected_end != blob.len() as u64 {
        return Err(bad(
            "blob",
            format!(
                "{} trailing bytes after the last tensor",
                blob.len() as u64 - expected_end
            ),
        ));
    }
    let rng_state = manifest.rng_state;
    rng_state.restore()?;
    Ok(Checkpoint {
        config: manifest.config,
        params,
        rng_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::Rng as _;

    fn sample() -> Checkpoint {
        let config = RunConfig {
            d: 8,
            heads: 2,
            num_layers: 2,
            mu: 1,
            eta: 2,
            ..RunConfig::default()
        };
        let mut rng = Rng::seed_from_u64(9);
        rng.set_stream(4);
        let _: u64 = rng.random();
        let params = init_params(&config.model(), 1).unwrap();
        Checkpoint {
            config,
            params,
            rng_state: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample();
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path(), Some(&ckpt.config.model()), false).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.params.names(), ckpt.params.names());
        for (a, b) in back.params.tensors().iter().zip(ckpt.params.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let mut r1 = back.rng_state.restore().unwrap();
        let mut r2 = ckpt.rng_state.restore().unwrap();
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    }

    #[test]
    fn truncated_blob_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample();
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let path = dir.path().join(BLOB);
        let blob = std::fs::read(&path).unwrap();
        std::fs::write(&path, &blob[..blob.len() - 12]).unwrap();
        let last = ckpt.params.names().last().unwrap().clone();
        match load_checkpoint(dir.path(), None, false) {
            Err(MuseError::Checkpoint { entry, .. }) => assert_eq!(entry, last),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_config_is_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample();
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let mut other = ckpt.config.model();
        other.exchange.theta = 0.3;
        assert!(matches!(
            load_checkpoint(dir.path(), Some(&other), false),
            Err(MuseError::Checkpoint { .. })
        ));
        let forced = load_checkpoint(dir.path(), Some(&other), true).unwrap();
        assert_eq!(forced.params, ckpt.params);
    }

    #[test]
    fn tampered_offset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        m["tensors"][1]["offset"] = serde_json::json!(u64::MAX - 3);
        let name = m["tensors"][1]["name"].as_str().unwrap().to_string();
        std::fs::write(&path, m.to_string()).unwrap();
        match load_checkpoint(dir.path(), None, false) {
            Err(MuseError::Checkpoint { entry, .. }) => assert_eq!(entry, name),
            other => panic!("{other:?}"),
        }
    }
}
