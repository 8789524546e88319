//! Attention dump directories.
//!
//! `manifest.json` describes the dump; each layer has one file of per-head maps
//! (`heads × seq_len × seq_len`) and one of per-head value terms
//! (`heads × seq_len × d_model`), both little-endian f32, head-major then
//! row-major. A dump holds a single sequence.

use std::path::{Component, Path};

use serde::{Deserialize, Serialize};
use shd_core::{Mask, Matrix};

use crate::error::CliError;

pub const DUMP_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Row sums of stored maps must be within this of 1.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFiles {
    pub maps: String,
    pub values: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpManifest {
    pub version: u32,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub dtype: String,
    pub byte_order: String,
    pub causal: bool,
    pub files: Vec<LayerFiles>,
}

/// Maps and value terms of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDump {
    pub maps: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub manifest: DumpManifest,
    pub layers: Vec<LayerDump>,
}

fn bad(dir: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("invalid dump {}: {msg}", dir.display()))
}

fn to_bytes(ms: &[Matrix]) -> Vec<u8> {
    ms.iter()
        .flat_map(|m| m.as_slice().iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect()
}

fn from_bytes(bytes: &[u8], count: usize, rows: usize, cols: usize) -> Vec<Matrix> {
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    vals.chunks_exact(rows * cols)
        .take(count)
        .map(|c| Matrix::from_vec(rows, cols, c.to_vec()).expect("chunk has rows·cols values"))
        .collect()
}

fn safe_relative(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

impl Dump {
    /// Builds a dump, checking shapes against each other.
    pub fn new(layers: Vec<LayerDump>, causal: bool) -> Result<Self, CliError> {
        let first = layers
            .first()
            .ok_or_else(|| CliError::Usage("a dump needs at least one layer".into()))?;
        let heads = first.maps.len();
        let seq_len = first.maps.first().map(Matrix::rows).unwrap_or(0);
        let d_model = first.values.first().map(Matrix::cols).unwrap_or(0);
        if heads == 0 || seq_len == 0 || d_model == 0 {
            return Err(CliError::Usage("a dump needs at least one head".into()));
        }
        for l in &layers {
            let ok = l.maps.len() == heads
                && l.values.len() == heads
                && l.maps.iter().all(|m| m.shape() == (seq_len, seq_len))
                && l.values.iter().all(|v| v.shape() == (seq_len, d_model));
            if !ok {
                return Err(CliError::Usage("layers disagree on dump shapes".into()));
            }
        }
        let manifest = DumpManifest {
            version: DUMP_VERSION,
            layers: layers.len(),
            heads,
            seq_len,
            d_model,
            dtype: "f32".into(),
            byte_order: "little".into(),
            causal,
            files: (0..layers.len())
                .map(|i| LayerFiles {
                    maps: format!("layer{i}_maps.bin"),
                    values: format!("layer{i}_values.bin"),
                })
                .collect(),
        };
        Ok(Dump { manifest, layers })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io("cannot create", dir, e))?;
        for (files, layer) in self.manifest.files.iter().zip(&self.layers) {
            for (name, data) in [(&files.maps, &layer.maps), (&files.values, &layer.values)] {
                let p = dir.join(name);
                std::fs::write(&p, to_bytes(data)).map_err(|e| CliError::io("cannot write", &p, e))?;
            }
        }
        let p = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        std::fs::write(&p, json + "\n").map_err(|e| CliError::io("cannot write", &p, e))
    }

    /// Reads and validates a dump directory.
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let mp = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mp).map_err(|e| CliError::io("cannot read", &mp, e))?;
        let m: DumpManifest = serde_json::from_str(&text).map_err(|e| bad(dir, e))?;
        if m.version != DUMP_VERSION {
            return Err(bad(dir, format!("unsupported version {}", m.version)));
        }
        if m.dtype != "f32" || m.byte_order != "little" {
            return Err(bad(dir, "only little-endian f32 dumps are supported"));
        }
        if m.layers == 0 || m.heads == 0 || m.seq_len == 0 || m.d_model == 0 {
            return Err(bad(dir, "dimensions must be positive"));
        }
        if m.files.len() != m.layers {
            return Err(bad(
                dir,
                format!("{} file entries for {} layers", m.files.len(), m.layers),
            ));
        }
        let mask = m.causal.then(|| Mask::causal(m.seq_len));
        let mut layers = Vec::with_capacity(m.layers);
        for (l, files) in m.files.iter().enumerate() {
            let read = |name: &str, cols: usize| -> Result<Vec<Matrix>, CliError> {
                if !safe_relative(name) {
                    return Err(bad(
                        dir,
                        format!("file path {name:?} must be relative and inside the dump"),
                    ));
                }
                let p = dir.join(name);
                let bytes = std::fs::read(&p).map_err(|e| CliError::io("cannot read", &p, e))?;
                let want = m.heads * m.seq_len * cols * 4;
                if bytes.len() != want {
                    return Err(bad(dir, format!("{name} has {} bytes, expected {want}", bytes.len())));
                }
                Ok(from_bytes(&bytes, m.heads, m.seq_len, cols))
            };
            let maps = read(&files.maps, m.seq_len)?;
            let values = read(&files.values, m.d_model)?;
            for (h, a) in maps.iter().enumerate() {
                check_map(a, mask.as_ref()).map_err(|msg| bad(dir, format!("layer {l} head {h}: {msg}")))?;
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad(dir, format!("layer {l} values are not finite")));
            }
            layers.push(LayerDump { maps, values });
        }
        Ok(Dump { manifest: m, layers })
    }
}

fn check_map(a: &Matrix, mask: Option<&Mask>) -> Result<(), String> {
    for i in 0..a.rows() {
        let mut sum = 0.0;
        for (j, &v) in a.row(i).iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("entry ({i},{j}) = {v} is not a probability"));
            }
            if v != 0.0 && mask.is_some_and(|m| !m.allows(i, j)) {
                return Err(format!("entry ({i},{j}) is masked but non-zero"));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(format!("row {i} sums to {sum}"));
        }
    }
    Ok(())
}
