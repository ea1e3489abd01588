//! Checkpoint files: one JSON header line, then the flat parameter vector as
//! little-endian `f64`s.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, ArchConfig, BlockInfo, RegressorModel, TrainConfig, TrainingHistory};
use crate::error::{Error, Result};
use crate::geometry::Calibration;
use crate::morphable::MorphableModel;

pub const FORMAT_NAME: &str = "morphloss-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub model_hash: String,
    pub landmarks: usize,
    pub calibration: Calibration,
    pub arch: ArchConfig,
    pub config: Option<TrainConfig>,
    pub epoch: usize,
    pub metrics: CheckpointMetrics,
    pub blocks: Vec<BlockInfo>,
    pub n_params: usize,
}

impl CheckpointHeader {
    pub fn new(reg: &RegressorModel, config: Option<&TrainConfig>, history: Option<&TrainingHistory>) -> Self {
        let last = history.and_then(|h| h.epochs.last());
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            model_hash: reg.decoder().content_hash(),
            landmarks: reg.input_dim() / 2,
            calibration: *reg.calibration(),
            arch: reg.arch().clone(),
            config: config.cloned(),
            epoch: last.map_or(0, |e| e.epoch),
            metrics: CheckpointMetrics {
                train_loss: last.map(|e| e.train_loss),
                val_loss: last.and_then(|e| e.val_loss),
            },
            blocks: reg.blocks().to_vec(),
            n_params: reg.n_params(),
        }
    }
}

pub fn encode(reg: &RegressorModel, config: Option<&TrainConfig>, history: Option<&TrainingHistory>) -> Vec<u8> {
    let header = CheckpointHeader::new(reg, config, history);
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(8 * reg.n_params());
    for p in reg.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Splits a checkpoint into its header and parameters, validating the layout.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f64>)> {
    let newline = bytes
        .iter()
        .take(MAX_HEADER_BYTES)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint", "missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut next = 0usize;
    for b in &header.blocks {
        let len = b
            .rows
            .checked_mul(b.cols)
            .ok_or_else(|| Error::format("checkpoint", "block size overflows"))?;
        if b.offset != next {
            return Err(Error::format("checkpoint", format!("block {} is not contiguous", b.name)));
        }
        next = next
            .checked_add(len)
            .ok_or_else(|| Error::format("checkpoint", "block size overflows"))?;
    }
    if next != header.n_params {
        return Err(Error::format("checkpoint", "manifest does not cover the parameters"));
    }
    let body = &bytes[newline + 1..];
    if Some(body.len()) != header.n_params.checked_mul(8) {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} parameter bytes, found {}", header.n_params.saturating_mul(8), body.len()),
        ));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, params))
}

/// Rebuilds the regressor from decoded checkpoint contents.
pub fn restore(model: &MorphableModel, header: &CheckpointHeader, params: Vec<f64>) -> Result<RegressorModel> {
    if header.model_hash != model.content_hash() {
        return Err(Error::format("checkpoint", "model hash does not match the supplied model"));
    }
    let mut reg = init_model(model, &header.arch, &header.calibration, header.landmarks, 0)?;
    if reg.blocks() != header.blocks.as_slice() {
        return Err(Error::format("checkpoint", "block manifest does not match the architecture"));
    }
    reg.set_params(params)?;
    Ok(reg)
}

pub fn save(
    path: &Path,
    reg: &RegressorModel,
    config: Option<&TrainConfig>,
    history: Option<&TrainingHistory>,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(reg, config, history))?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path, model: &MorphableModel) -> Result<(RegressorModel, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (header, params) = decode(&bytes)?;
    let reg = restore(model, &header, params)?;
    Ok((reg, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::template::synthetic_model;

    fn reg() -> (MorphableModel, RegressorModel) {
        let (_, m) = synthetic_model(48, 10, 4, 1).unwrap();
        let arch = ArchConfig {
            encoder: vec![6],
            head_hidden: 5,
            ..ArchConfig::default()
        };
        let r = init_model(&m, &arch, &Calibration::default(), 4, 9).unwrap();
        (m, r)
    }

    #[test]
    fn round_trip() {
        let (m, r) = reg();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &r, None, None).unwrap();
        let (back, header) = load(&path, &m).unwrap();
        assert_eq!(back, r);
        assert_eq!(header.n_params, r.n_params());
    }

    #[test]
    fn rejects_damage() {
        let (m, r) = reg();
        let bytes = encode(&r, None, None);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"{}").is_err());
        let (h, p) = decode(&bytes).unwrap();
        let (_, other) = synthetic_model(48, 10, 4, 2).unwrap();
        assert!(restore(&other, &h, p.clone()).is_err());
        assert!(restore(&m, &h, p).is_ok());
    }
}
