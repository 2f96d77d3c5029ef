//! The reprogrammed regression model.
//!
//! Per channel: patchify → linear patch embedding → multi-head
//! cross-attention onto learned prototypes (reprogramming into the backbone
//! hidden dimension) → statistics prefix + frozen transformer backbone →
//! flatten retained features → channel-specific shape and mean heads.
//! Channel outputs are combined by shared aggregation weights and the
//! aggregated shape is re-centered to zero mean. Predictions stay in
//! physical micrometers end to end; there is no output denormalization.

mod forward;
mod params;

pub use forward::{build_forward, forward, ForwardBuild};
pub use params::{
    Affine, BackboneBlock, ModelConfig, ModelParams, ReprogramParams, STAT_DIM,
};

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::PROFILE_POINTS;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("series length {n_time} shorter than patch length {patch_len}")]
    SeriesTooShort { n_time: usize, patch_len: usize },
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("expected {expected} channel outputs, got {got}")]
    ChannelCountMismatch { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    CheckpointVersion { expected: u32, got: u32 },
    #[error("checkpoint backbone checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Model output for one wafer: zero-mean shape, scalar mean, and the
/// reconstructed depth `shape + mean`, all in micrometers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub shape: Vec<f64>,
    pub mean: f64,
    pub depth: Vec<f64>,
    /// Channel-specific head outputs, retained for diagnostics.
    pub per_channel: Option<Vec<(Vec<f64>, f64)>>,
}

impl Prediction {
    pub fn constant(mean: f64) -> Self {
        Self {
            shape: vec![0.0; PROFILE_POINTS],
            mean,
            depth: vec![mean; PROFILE_POINTS],
            per_channel: None,
        }
    }
}

/// Number of patches for a series of length `n_time`: boundary patches at
/// the sequence ends are included, so the count is
/// `(n_time - patch_len) / stride + 2`.
pub fn n_patches(n_time: usize, patch_len: usize, stride: usize) -> usize {
    (n_time - patch_len) / stride + 2
}

/// Splits a series into overlapping patches of `patch_len` at `stride`.
/// The final boundary patch replicates the last sample for up to `stride`
/// positions past the end of the series.
pub fn patchify(
    series: &[f64],
    patch_len: usize,
    stride: usize,
) -> Result<Array2<f64>, ModelError> {
    let n_time = series.len();
    if n_time < patch_len {
        return Err(ModelError::SeriesTooShort { n_time, patch_len });
    }
    let n_p = n_patches(n_time, patch_len, stride);
    let mut out = Array2::zeros((n_p, patch_len));
    let last = *series.last().expect("non-empty by n_time >= patch_len >= 1");
    for i in 0..n_p {
        for j in 0..patch_len {
            let t = i * stride + j;
            out[[i, j]] = if t < n_time { series[t] } else { last };
        }
    }
    Ok(out)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    backbone_checksum: String,
    params: ModelParams,
}

/// Writes the full parameter set (config, trainable tensors, frozen
/// backbone and its checksum) as version-tagged JSON.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), ModelError> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        backbone_checksum: params.backbone_checksum(),
        params: params.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

/// Loads a checkpoint, verifying version tag and backbone checksum.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            got: ckpt.version,
        });
    }
    if ckpt.params.backbone_checksum() != ckpt.backbone_checksum {
        return Err(ModelError::ChecksumMismatch);
    }
    Ok(ckpt.params)
}
