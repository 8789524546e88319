//! Parameter file layout:
//!
//! ```text
//! 8 bytes   magic "SHDPARAM"
//! u32 LE    format version (1)
//! u32 LE    manifest length L
//! L bytes   JSON manifest {"config": {...}, "tensors": [{"name", "rows", "cols"}, ...]}
//! f32 LE    tensor values, manifest order, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use shd_core::harness::TinyTransformer;
use shd_core::{Matrix, SeededRng};

use crate::config::ModelSection;
use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"SHDPARAM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsManifest {
    pub config: ModelSection,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &TinyTransformer) -> Vec<u8> {
    let tensors = model.tensors();
    let manifest = ParamsManifest {
        config: model.config.into(),
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &tensors {
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Usage(format!("malformed parameter file: {}", msg.into()))
}

pub fn decode(bytes: &[u8]) -> Result<TinyTransformer, CliError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: ParamsManifest = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    // Seeded init only provides the right shapes; every value is overwritten.
    let mut model = TinyTransformer::init(manifest.config.into(), &mut SeededRng::new(0))?;
    let expected: Vec<TensorEntry> = model
        .tensors()
        .iter()
        .map(|(name, m)| TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
        })
        .collect();
    if expected != manifest.tensors {
        return Err(bad("tensor list does not match the model configuration"));
    }
    let mut values = bytes[16 + len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let count: usize = expected.iter().map(|t| t.rows * t.cols).sum();
    if bytes.len() - 16 - len != 4 * count {
        return Err(bad(format!("expected {count} values")));
    }
    for t in model.tensors_mut() {
        let (r, c) = t.shape();
        let data: Vec<f64> = values.by_ref().take(r * c).map(f64::from).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Numeric("parameter file holds non-finite values".into()));
        }
        *t = Matrix::from_vec(r, c, data)?;
    }
    Ok(model)
}

pub fn save(path: &Path, model: &TinyTransformer) -> Result<(), CliError> {
    std::fs::write(path, encode(model)).map_err(|e| CliError::io("cannot write", path, e))
}

pub fn load(path: &Path) -> Result<TinyTransformer, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io("cannot read", path, e))?;
    decode(&bytes)
}
