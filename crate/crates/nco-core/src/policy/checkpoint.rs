//! Checkpoint serialization: a length-prefixed JSON manifest followed by a
//! blob of little-endian 64-bit floats.
//!
//! Layout on disk:
//!   bytes 0..8    manifest byte length, little-endian u64
//!   bytes 8..8+L  JSON manifest {"version","hyper","seed","tensors"}
//!   remainder     all tensor values, concatenated in manifest order
//!
//! Offsets in the manifest count values (not bytes) from the blob start.
//! Values are moved bit-for-bit, so a round-trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::policy::{NamedTensor, PolicyHyper, PolicyParams};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    hyper: PolicyHyper,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn checkpoint_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `params` to `path`, replacing any existing file.
pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(params.tensors().len());
    let mut offset = 0u64;
    let mut blob = Vec::new();
    for nt in params.tensors() {
        entries.push(TensorEntry {
            name: nt.name.clone(),
            shape: nt.tensor.shape().to_vec(),
            offset,
        });
        for &v in nt.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += nt.tensor.len() as u64;
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        hyper: params.hyper().clone(),
        seed: params.seed(),
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&blob);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(checkpoint_error(path, "file shorter than its header"));
    }
    let manifest_len = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let blob_start = 8usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| checkpoint_error(path, "manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[8..blob_start])
        .map_err(|e| checkpoint_error(path, format!("manifest parse failed: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(checkpoint_error(
            path,
            format!(
                "version {} unsupported, expected {CHECKPOINT_VERSION}",
                manifest.version
            ),
        ));
    }
    let blob = &bytes[blob_start..];
    if blob.len() % 8 != 0 {
        return Err(checkpoint_error(path, "value blob is not 8-byte aligned"));
    }
    let total_values = blob.len() / 8;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= total_values)
            .ok_or_else(|| {
                checkpoint_error(
                    path,
                    format!("tensor {} extends past the value blob", entry.name),
                )
            })?;
        let data: Vec<f64> = blob[start * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name.clone(),
            tensor: Tensor::new(entry.shape.clone(), data)
                .map_err(|e| checkpoint_error(path, e.to_string()))?,
        });
    }
    PolicyParams::from_parts(manifest.hyper, manifest.seed, tensors)
        .map_err(|e| checkpoint_error(path, e.to_string()))
}
