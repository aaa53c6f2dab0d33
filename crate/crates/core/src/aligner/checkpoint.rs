//! JSON checkpoint container.
//!
//! ```json
//! {"format_version": 1,
//!  "config": {"L": 16, "F": 24, "D": 64, "C": 256, "pooling": "max", "euler_enabled": true},
//!  "arrays": {"dictionary": {"shape": [256, 64], "dtype": "f32", "data": "<base64 LE>"}, ...}}
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AlignerConfig, AlignerParams, ParamTensor};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config: AlignerConfig,
    arrays: BTreeMap<String, ArrayRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayRecord {
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

fn expected_shape(t: ParamTensor, cfg: &AlignerConfig) -> Vec<usize> {
    match t {
        ParamTensor::Tokenizer => vec![cfg.features, cfg.dim],
        ParamTensor::EulerProj => vec![cfg.dim, cfg.dim],
        ParamTensor::Dictionary => vec![cfg.atoms, cfg.dim],
        ParamTensor::LogScale => vec![1],
    }
}

fn encode(values: &[f64], shape: Vec<usize>) -> ArrayRecord {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    ArrayRecord { shape, dtype: "f32".into(), data: STANDARD.encode(bytes) }
}

fn decode(name: &str, rec: &ArrayRecord, shape: &[usize]) -> Result<Vec<f64>> {
    if rec.dtype != "f32" {
        return Err(Error::Checkpoint(format!("{name}: unsupported dtype '{}'", rec.dtype)));
    }
    if rec.shape != shape {
        return Err(Error::Checkpoint(format!("{name}: shape {:?} does not match config shape {:?}", rec.shape, shape)));
    }
    let bytes = STANDARD
        .decode(&rec.data)
        .map_err(|e| Error::Checkpoint(format!("{name}: bad base64: {e}")))?;
    let count: usize = shape.iter().product();
    if bytes.len() != count * 4 {
        return Err(Error::Checkpoint(format!("{name}: {} bytes for {count} f32 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &AlignerParams, cfg: &AlignerConfig) -> Result<()> {
    if params.features() != cfg.features || params.dim() != cfg.dim || params.atoms() != cfg.atoms {
        return Err(Error::Checkpoint(format!(
            "parameters (F={}, D={}, C={}) do not match config {cfg:?}",
            params.features(),
            params.dim(),
            params.atoms()
        )));
    }
    let arrays = ParamTensor::ALL
        .iter()
        .map(|&t| (t.name().to_string(), encode(params.tensor(t), expected_shape(t, cfg))))
        .collect();
    let file = CheckpointFile { format_version: CHECKPOINT_VERSION, config: *cfg, arrays };
    serde_json::to_writer_pretty(&mut w, &file)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(AlignerConfig, AlignerParams)> {
    let file: CheckpointFile = serde_json::from_reader(r)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format_version {}", file.format_version)));
    }
    let cfg = file.config;
    cfg.validate()?;
    let mut params = AlignerParams {
        tokenizer: Array2::zeros((cfg.features, cfg.dim)),
        euler_proj: Array2::zeros((cfg.dim, cfg.dim)),
        dictionary: Array2::zeros((cfg.atoms, cfg.dim)),
        log_scale: 0.0,
    };
    for t in ParamTensor::ALL {
        let rec = file
            .arrays
            .get(t.name())
            .ok_or_else(|| Error::Checkpoint(format!("missing array '{}'", t.name())))?;
        let values = decode(t.name(), rec, &expected_shape(t, &cfg))?;
        params.tensor_mut(t).copy_from_slice(&values);
    }
    if let Some(extra) = file.arrays.keys().find(|k| ParamTensor::ALL.iter().all(|t| t.name() != k.as_str())) {
        return Err(Error::Checkpoint(format!("unexpected array '{extra}'")));
    }
    if let Some(t) = params.first_non_finite() {
        return Err(Error::Checkpoint(format!("{t} holds non-finite values")));
    }
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, params: &AlignerParams, cfg: &AlignerConfig) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, params, cfg)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AlignerConfig, AlignerParams)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
