//! Checkpoints: `<base>.json` manifest plus `<base>.bin` holding raw
//! little-endian f32 arrays (all values, then first moments, then second
//! moments, each in layout order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::raster::{header_path, payload_path};

const FORMAT: &str = "sarlc-swin-unet-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    step: u64,
    byte_order: String,
    dtype: String,
    /// Offsets in elements within each of the three sections.
    arrays: Vec<ArrayEntry>,
    section_len: usize,
}

pub fn save_checkpoint(params: &ModelParams, base: impl AsRef<Path>) -> Result<()> {
    let base = base.as_ref();
    let mut offset = 0;
    let arrays = params
        .specs
        .iter()
        .map(|s| {
            let e = ArrayEntry { name: s.name.clone(), shape: s.shape.clone(), offset };
            offset += s.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        config: params.config.clone(),
        step: params.step,
        byte_order: "LE".into(),
        dtype: "f32".into(),
        arrays,
        section_len: offset,
    };
    let mut bytes = Vec::with_capacity(offset * 12);
    for section in [&params.values, &params.m, &params.v] {
        for a in section {
            for v in a {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let hp = header_path(base);
    fs::write(&hp, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&hp, e))?;
    let pp = payload_path(base);
    fs::write(&pp, bytes).map_err(|e| Error::io(&pp, e))
}

pub fn load_checkpoint(base: impl AsRef<Path>) -> Result<ModelParams> {
    let base = base.as_ref();
    let hp = header_path(base);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let bad = |m: String| Error::Header { path: hp.clone(), message: m };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != FORMAT || manifest.byte_order != "LE" || manifest.dtype != "f32" {
        return Err(bad("not a little-endian f32 Swin-Unet checkpoint".into()));
    }
    manifest.config.validate()?;
    let specs = layout(&manifest.config);
    let mut offset = 0;
    for (s, e) in specs.iter().zip(&manifest.arrays) {
        if s.name != e.name || s.shape != e.shape || e.offset != offset {
            return Err(bad(format!("array {} does not match the configured layout", e.name)));
        }
        offset += s.len();
    }
    if specs.len() != manifest.arrays.len() || offset != manifest.section_len {
        return Err(bad("array list does not match the configured layout".into()));
    }
    let pp = payload_path(base);
    let bytes = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    if bytes.len() != 12 * offset {
        return Err(Error::LengthMismatch { path: pp, expected: 12 * offset as u64, actual: bytes.len() as u64 });
    }
    let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut section = || -> Vec<Vec<f32>> { specs.iter().map(|s| floats.by_ref().take(s.len()).collect()).collect() };
    let values = section();
    let m = section();
    let v = section();
    Ok(ModelParams { config: manifest.config, specs, values, m, v, step: manifest.step })
}
