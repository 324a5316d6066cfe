//! Parameter checkpoints: a JSON manifest plus a blob of little-endian f64.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trady_core::network::Parameters;
use trady_core::Tensor4;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path that sits next to a manifest: `x.json` → `x.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn named_tensors(params: &Parameters) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out: Vec<(String, Vec<usize>, &[f64])> = params
        .conv
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("conv.{i}.weight"), t.shape().to_vec(), t.data()))
        .collect();
    out.push((
        "classifier.weight".into(),
        params.classifier_weight.shape().to_vec(),
        params.classifier_weight.data(),
    ));
    out.push((
        "classifier.bias".into(),
        vec![params.classifier_bias.len()],
        &params.classifier_bias[..],
    ));
    out
}

pub fn save(params: &Parameters, manifest_path: &Path) -> Result<Manifest> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in named_tensors(params) {
        let offset = bytes.len();
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f64".into(),
            offset,
            length: bytes.len() - offset,
        });
    }
    let manifest = Manifest {
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    std::fs::write(&blob, &bytes).map_err(|e| HarnessError::io(&blob, e))?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| HarnessError::json(manifest_path, e))?;
    std::fs::write(manifest_path, json).map_err(|e| HarnessError::io(manifest_path, e))?;
    Ok(manifest)
}

pub fn load(manifest_path: &Path) -> Result<Parameters> {
    let text = std::fs::read(manifest_path).map_err(|e| HarnessError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| HarnessError::json(manifest_path, e))?;
    let blob = manifest_path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob).map_err(|e| HarnessError::io(&blob, e))?;
    decode(&manifest, &bytes).map_err(|reason| HarnessError::Checkpoint {
        path: manifest_path.to_path_buf(),
        reason,
    })
}

/// Rebuilds parameters from a manifest and blob bytes, checking every invariant.
pub fn decode(manifest: &Manifest, bytes: &[u8]) -> std::result::Result<Parameters, String> {
    let mut expected_offset = 0;
    let mut conv = Vec::new();
    let mut weight = None;
    let mut bias = None;
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return Err(format!("tensor {} has dtype {:?}, expected \"f64\"", t.name, t.dtype));
        }
        if t.offset != expected_offset {
            return Err(format!("tensor {} starts at byte {}, expected {}", t.name, t.offset, expected_offset));
        }
        let count: usize = t.shape.iter().product();
        if t.length != count * 8 {
            return Err(format!("tensor {} has {} bytes for shape {:?}", t.name, t.length, t.shape));
        }
        let end = t.offset + t.length;
        if end > bytes.len() {
            return Err(format!("blob has {} bytes, tensor {} needs {}", bytes.len(), t.name, end));
        }
        let data: Vec<f64> = bytes[t.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        expected_offset = end;
        let as4 = |shape: &[usize]| -> std::result::Result<[usize; 4], String> {
            shape
                .try_into()
                .map_err(|_| format!("tensor {} must be rank 4, has shape {:?}", t.name, shape))
        };
        match t.name.as_str() {
            "classifier.weight" => weight = Some(Tensor4::from_vec(as4(&t.shape)?, data).map_err(|e| e.to_string())?),
            "classifier.bias" => bias = Some(data),
            name => {
                let idx: usize = name
                    .strip_prefix("conv.")
                    .and_then(|s| s.strip_suffix(".weight"))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| format!("unknown tensor name {name:?}"))?;
                if idx != conv.len() {
                    return Err(format!("conv tensors out of order at {name:?}"));
                }
                conv.push(Tensor4::from_vec(as4(&t.shape)?, data).map_err(|e| e.to_string())?);
            }
        }
    }
    if expected_offset != bytes.len() {
        return Err(format!("blob has {} bytes but the manifest covers {}", bytes.len(), expected_offset));
    }
    Ok(Parameters {
        conv,
        classifier_weight: weight.ok_or("missing classifier.weight")?,
        classifier_bias: bias.ok_or("missing classifier.bias")?,
    })
}
