//! Single-file weight container.
//!
//! Layout: the magic `SANW0001`, a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor as little-endian `f32` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, SharingPolicy};
use crate::model::params::{ModelParams, TensorSpec, Weights};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"SANW0001";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset of the tensor inside the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub policy: SharingPolicy,
    pub tensors: Vec<TensorRecord>,
}

pub fn encode_weights(params: &ModelParams) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    let named = params.weights().named();
    for (name, m) in &named {
        tensors.push(TensorRecord {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset,
        });
        offset += 4 * m.as_slice().len() as u64;
    }
    let manifest = Manifest {
        config: params.config().clone(),
        policy: params.policy().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &named {
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelParams> {
    let format = |m: String| Error::Format(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format("missing SANW0001 magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if len > body.len() as u64 {
        return Err(format(format!(
            "manifest length {len} exceeds the {} bytes present",
            body.len()
        )));
    }
    let (json, blob) = body.split_at(len as usize);
    let manifest: Manifest = serde_json::from_slice(json)
        .map_err(|e| format(format!("manifest is not valid JSON: {e}")))?;
    let template = Weights::<TensorSpec>::template(&manifest.config, &manifest.policy)
        .map_err(|e| format(format!("manifest config/policy rejected: {e}")))?;

    let expected = template.named();
    if expected.len() != manifest.tensors.len() {
        return Err(format(format!(
            "manifest lists {} tensors, the policy requires {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    for ((name, spec), rec) in expected.iter().zip(&manifest.tensors) {
        if *name != rec.name || rec.shape != [spec.rows, spec.cols] {
            return Err(format(format!(
                "tensor {} {:?} does not match expected {name} [{}, {}]",
                rec.name, rec.shape, spec.rows, spec.cols
            )));
        }
        if rec.offset != offset {
            return Err(format(format!(
                "tensor {name} at offset {} (expected {offset})",
                rec.offset
            )));
        }
        offset += 4 * spec.len() as u64;
    }
    if blob.len() as u64 != offset {
        return Err(format(format!(
            "blob holds {} bytes, manifest describes {offset}",
            blob.len()
        )));
    }

    let weights = template.try_map(|name, spec| -> Result<Mat> {
        let rec = manifest
            .tensors
            .iter()
            .find(|r| r.name == name)
            .expect("names checked");
        let start = rec.offset as usize;
        let data = blob[start..start + 4 * spec.len()]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Mat::from_vec(spec.rows, spec.cols, data)
    })?;
    if let Some((name, _)) = weights.named().into_iter().find(|(_, m)| !m.is_finite()) {
        return Err(format(format!("tensor {name} holds non-finite values")));
    }
    ModelParams::from_weights(manifest.config, manifest.policy, weights)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(params)?)
}

pub fn load_weights(path: &Path) -> Result<ModelParams> {
    decode_weights(&fs::read(path)?)
}

/// Loads and checks that the file was written for `config` and `policy`.
pub fn load_weights_expecting(
    path: &Path,
    config: &ModelConfig,
    policy: &SharingPolicy,
) -> Result<ModelParams> {
    let params = load_weights(path)?;
    if params.config() != config {
        return Err(Error::Format(format!(
            "{} holds a model with a different configuration",
            path.display()
        )));
    }
    if params.policy() != policy {
        return Err(Error::Format(format!(
            "{} was saved under policy {:?}, expected {:?}",
            path.display(),
            params.policy(),
            policy
        )));
    }
    Ok(params)
}
