//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "MLDECKPT"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    8*N   parameter values, f64 little-endian: alpha (4 values), then
//!               each branch's flat parameter store in header order
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! The header records the target class, the training config and its hash, the
//! training history, and per branch the backbone kind and the shape manifest
//! (name, shape, group, trainability, offset of every tensor). Nothing
//! time-dependent is stored, so identical models produce identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::layers::ParamInfo;
use crate::backbone::{Backbone, BackboneError, BackboneKind};
use crate::dataset::DiagnosisClass;
use crate::fusion::{FusionParameters, BRANCHES};

use super::{EpochRecord, MldeModel, TrainConfig, TrainedModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLDECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint checksum mismatch; the file is truncated or corrupt")]
    Checksum,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Layout(#[from] BackboneError),
    #[error("checkpoint {field} is {found} but the configuration expects {expected}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    target: DiagnosisClass,
    degenerate: bool,
    config: TrainConfig,
    config_hash: String,
    history: Vec<EpochRecord>,
    branches: Vec<BranchHeader>,
}

#[derive(Serialize, Deserialize)]
struct BranchHeader {
    kind: BackboneKind,
    params: Vec<ParamInfo>,
}

/// Serializes `model` into the checkpoint container.
pub fn checkpoint_bytes(model: &TrainedModel) -> Vec<u8> {
    let header = Header {
        target: model.target,
        degenerate: model.degenerate,
        config: model.config.clone(),
        config_hash: model.config.hash(),
        history: model.history.clone(),
        branches: model
            .model
            .branches
            .iter()
            .map(|b| BranchHeader {
                kind: b.kind(),
                params: b.store().infos().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let values = model
        .model
        .fusion
        .alpha
        .iter()
        .chain(model.model.branches.iter().flat_map(|b| b.store().values()));
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a checkpoint; the whole file is verified before anything is decoded.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainedModel, CheckpointError> {
    if bytes.len() < PREFIX_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(CheckpointError::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let blob_start = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&end| end <= body.len())
        .ok_or_else(|| CheckpointError::Header("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(&body[PREFIX_LEN..blob_start]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let blob = &body[blob_start..];
    if blob.len() % 8 != 0 {
        return Err(CheckpointError::Header(
            "parameter blob is not a whole number of f64".into(),
        ));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    if header.branches.len() != BRANCHES {
        return Err(CheckpointError::Header(format!(
            "{} branches, expected {BRANCHES}",
            header.branches.len()
        )));
    }
    let alpha: Vec<f64> = values.by_ref().take(BRANCHES).collect();
    let alpha: [f64; BRANCHES] = alpha
        .try_into()
        .map_err(|_| CheckpointError::Header("missing fusion parameters".into()))?;
    let fusion = FusionParameters::new(alpha).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut branches = Vec::with_capacity(BRANCHES);
    for b in &header.branches {
        let n: usize = b.params.iter().map(ParamInfo::len).sum();
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() != n {
            return Err(CheckpointError::Header("parameter blob is too short".into()));
        }
        branches.push(Backbone::restore(b.kind, &b.params, v)?);
    }
    if values.next().is_some() {
        return Err(CheckpointError::Header("trailing parameter data".into()));
    }
    Ok(TrainedModel {
        target: header.target,
        config: header.config,
        model: MldeModel::new(branches, fusion),
        history: header.history,
        degenerate: header.degenerate,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&bytes)
}

/// Loads a checkpoint and checks that its preprocessing and architecture agree
/// with `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &TrainConfig,
) -> Result<TrainedModel, CheckpointError> {
    let model = load_checkpoint(path)?;
    let found = &model.config;
    let mismatch = |field, e: String, f: String| {
        Err(CheckpointError::ConfigMismatch {
            field,
            expected: e,
            found: f,
        })
    };
    if found.scales != expected.scales {
        return mismatch(
            "scales",
            format!("{:?}", expected.scales),
            format!("{:?}", found.scales),
        );
    }
    if found.norm_mean != expected.norm_mean || found.norm_std != expected.norm_std {
        return mismatch(
            "normalization",
            format!("{:?}/{:?}", expected.norm_mean, expected.norm_std),
            format!("{:?}/{:?}", found.norm_mean, found.norm_std),
        );
    }
    if found.backbone.kind != expected.backbone.kind {
        return mismatch(
            "backbone",
            expected.backbone.kind.name().to_string(),
            found.backbone.kind.name().to_string(),
        );
    }
    Ok(model)
}
