//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! JSON manifest, raw little-endian `f64` payloads, and a trailing SHA-256
//! of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::training::{create_file, AdamState, ModelState};

pub const MAGIC: &[u8; 8] = b"SINRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub group: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub step: u64,
    pub rng: RngState,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: hex::encode(rng.get_seed()),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let bad = |what: &str| Error::Checkpoint(format!("malformed RNG {what}"));
    let seed: [u8; 32] = hex::decode(&s.seed)
        .map_err(|_| bad("seed"))?
        .try_into()
        .map_err(|_| bad("seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse::<u128>().map_err(|_| bad("position"))?);
    Ok(rng)
}

/// Serializes `state` to bytes.
pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &str, role: TensorRole, m: &Mat| -> Result<()> {
        let group = format!("{:?}", ParamGroup::of(name)?);
        tensors.push(TensorEntry {
            name: name.to_string(),
            role,
            group,
            shape: [m.nrows(), m.ncols()],
            offset: payload.len() as u64,
        });
        for v in m.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    };
    for (name, m) in state.model.params.iter() {
        push(name, TensorRole::Param, m)?;
    }
    for (name, m) in &state.adam.m {
        push(name, TensorRole::AdamM, m)?;
    }
    for (name, m) in &state.adam.v {
        push(name, TensorRole::AdamV, m)?;
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: "f64".into(),
        byte_order: "little".into(),
        step: state.step,
        rng: rng_state(&state.rng),
        model: state.model.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses bytes written by [`encode_checkpoint`]. Nothing is returned unless
/// the whole archive checks out.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    if 20 + mlen > body.len() {
        return Err(corrupt("manifest length exceeds archive"));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&body[20..20 + mlen]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.dtype != "f64" || manifest.byte_order != "little" {
        return Err(corrupt("unsupported element type or byte order"));
    }
    let payload = &body[20 + mlen..];
    let mut params = ParamStore::new();
    let mut adam = AdamState::default();
    for t in &manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(corrupt(&format!("tensor {} runs past the payload", t.name)));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), values).map_err(|e| corrupt(&e.to_string()))?;
        match t.role {
            TensorRole::Param => params.insert(t.name.clone(), m)?,
            TensorRole::AdamM => {
                adam.m.insert(t.name.clone(), m);
            }
            TensorRole::AdamV => {
                adam.v.insert(t.name.clone(), m);
            }
        }
    }
    let model = Model::from_parts(manifest.model, params)?;
    let tunable: Vec<String> = model.params.tunable_names();
    let keys = |m: &BTreeMap<String, Mat>| m.keys().cloned().collect::<Vec<_>>();
    if keys(&adam.m) != tunable || keys(&adam.v) != tunable {
        return Err(corrupt("optimizer state does not match the tunable parameters"));
    }
    Ok(ModelState {
        model,
        adam,
        step: manifest.step,
        rng: restore_rng(&manifest.rng)?,
    })
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = create_file(&tmp)?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
