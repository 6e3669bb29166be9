//! Saves, reloads and inspects a checkpoint archive.

use stereoinr::checkpoint::{decode_checkpoint, encode_checkpoint, MAGIC};
use stereoinr::model::{Model, ModelConfig};
use stereoinr::training::ModelState;

fn main() -> stereoinr::Result<()> {
    let state = ModelState::new(Model::new(ModelConfig::compact(), 4)?, 5);
    let bytes = encode_checkpoint(&state)?;
    assert_eq!(&bytes[..8], MAGIC);
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[20..20 + mlen])?;
    println!("{} bytes, {} tensors", bytes.len(), manifest["tensors"].as_array().map_or(0, |t| t.len()));
    println!("step {}, rng {}", manifest["step"], manifest["rng"]);

    let back = decode_checkpoint(&bytes)?;
    assert!(back == state);
    let mut corrupt = bytes.clone();
    let last = corrupt.len() - 40;
    corrupt[last] ^= 1;
    println!("flipped payload bit: {}", decode_checkpoint(&corrupt).unwrap_err());
    Ok(())
}
