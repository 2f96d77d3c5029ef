//! Model configuration and parameter storage.

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{n_patches, ModelError};
use crate::conditioning::TOP_LAGS;
use crate::PROFILE_POINTS;

/// Length of the per-channel statistics vector fed to the prefix map:
/// mean, std, min, max, median, trend sign, and the top autocorrelation
/// lags.
pub const STAT_DIM: usize = 6 + TOP_LAGS;

/// Architecture hyperparameters. Defaults are desk-scale: the full
/// pipeline trains in minutes on a laptop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch length in samples.
    pub patch_len: usize,
    /// Patch stride in samples.
    pub stride: usize,
    /// Patch embedding dimension.
    pub embed_dim: usize,
    /// Cross-attention heads for reprogramming.
    pub attn_heads: usize,
    /// Number of learned prototype embeddings.
    pub n_prototypes: usize,
    /// Backbone hidden dimension.
    pub backbone_dim: usize,
    /// Retained feature dimension per token after the backbone.
    pub feature_dim: usize,
    /// Number of prefix tokens; 0 disables the prefix.
    pub prefix_len: usize,
    /// Frozen transformer depth; 0 makes the backbone the identity.
    pub backbone_layers: usize,
    /// Self-attention heads inside the backbone.
    pub backbone_heads: usize,
    /// Feed-forward hidden width inside the backbone.
    pub backbone_ff_dim: usize,
    /// Seed for deterministic parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            stride: 8,
            embed_dim: 32,
            attn_heads: 4,
            n_prototypes: 64,
            backbone_dim: 64,
            feature_dim: 32,
            prefix_len: 4,
            backbone_layers: 2,
            backbone_heads: 4,
            backbone_ff_dim: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Per-head dimension of the reprogramming attention.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attn_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.patch_len == 0 {
            return fail("patch_len must be at least 1".into());
        }
        if self.stride == 0 || self.stride > self.patch_len {
            return fail(format!(
                "stride must be in 1..=patch_len ({})",
                self.patch_len
            ));
        }
        if self.attn_heads == 0 || self.head_dim() == 0 {
            return fail("attn_heads must be >= 1 with nonzero head dim".into());
        }
        if self.n_prototypes == 0 {
            return fail("n_prototypes must be at least 1".into());
        }
        if self.feature_dim == 0 || self.feature_dim > self.backbone_dim {
            return fail(format!(
                "feature_dim must be in 1..=backbone_dim ({})",
                self.backbone_dim
            ));
        }
        if self.backbone_layers > 0 {
            if self.backbone_heads == 0 || !self.backbone_dim.is_multiple_of(self.backbone_heads) {
                return fail("backbone_heads must divide backbone_dim".into());
            }
            if self.backbone_ff_dim == 0 {
                return fail("backbone_ff_dim must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// A dense affine map `x -> x.w + b`, bias stored as a `1 x out` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Affine {
    fn glorot(rng: &mut StdRng, rows: usize, cols: usize, gain: f64) -> Self {
        Self {
            w: glorot(rng, rows, cols, gain),
            b: Array2::zeros((1, cols)),
        }
    }
}

fn glorot(rng: &mut StdRng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let a = gain * (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Query/key/value/output maps of the reprogramming cross-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprogramParams {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
}

/// One frozen pre-norm transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneBlock {
    pub ln1_gamma: Array2<f64>,
    pub ln1_beta: Array2<f64>,
    pub attn_q: Affine,
    pub attn_k: Affine,
    pub attn_v: Affine,
    pub attn_o: Affine,
    pub ln2_gamma: Array2<f64>,
    pub ln2_beta: Array2<f64>,
    pub ff_in: Affine,
    pub ff_out: Affine,
}

/// Per-channel output heads: shape (`d_f -> 89`) and mean (`d_f -> 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPair {
    pub shape: Affine,
    pub mean: Affine,
}

/// All model parameters. The backbone blocks are immutable after
/// initialization: no optimizer step ever touches them, which
/// [`ModelParams::backbone_checksum`] makes checkable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub n_channels: usize,
    pub n_time: usize,
    pub patch_embed: Affine,
    pub prototypes: Array2<f64>,
    pub reprogram: ReprogramParams,
    pub prefix: Option<Affine>,
    pub heads: Vec<HeadPair>,
    /// `1 x N_c` shared shape aggregation weights.
    pub shape_weights: Array2<f64>,
    /// `1 x N_c` shared mean aggregation weights.
    pub mean_weights: Array2<f64>,
    pub backbone: Vec<BackboneBlock>,
}

impl ModelParams {
    /// Deterministically initializes all parameters from `config.seed` for
    /// inputs of shape `n_channels x n_time`.
    pub fn init(config: &ModelConfig, n_channels: usize, n_time: usize) -> Result<Self, ModelError> {
        config.validate()?;
        if n_time < config.patch_len {
            return Err(ModelError::SeriesTooShort {
                n_time,
                patch_len: config.patch_len,
            });
        }
        let mut rng = StdRng::seed_from_u64(config.seed);
        let d_m = config.embed_dim;
        let d_bb = config.backbone_dim;
        let kd = config.attn_heads * config.head_dim();
        let n_p = n_patches(n_time, config.patch_len, config.stride);
        let d_f = n_p * config.feature_dim;

        let patch_embed = Affine::glorot(&mut rng, config.patch_len, d_m, 1.0);
        let prototypes = glorot(&mut rng, config.n_prototypes, d_bb, 1.0);
        let reprogram = ReprogramParams {
            query: Affine::glorot(&mut rng, d_m, kd, 1.0),
            key: Affine::glorot(&mut rng, d_bb, kd, 1.0),
            value: Affine::glorot(&mut rng, d_bb, kd, 1.0),
            output: Affine::glorot(&mut rng, kd, d_bb, 1.0),
        };
        let prefix = if config.prefix_len > 0 {
            Some(Affine::glorot(
                &mut rng,
                STAT_DIM,
                config.prefix_len * d_bb,
                1.0,
            ))
        } else {
            None
        };
        let heads = (0..n_channels)
            .map(|_| HeadPair {
                shape: Affine::glorot(&mut rng, d_f, PROFILE_POINTS, 0.3),
                mean: Affine::glorot(&mut rng, d_f, 1, 0.3),
            })
            .collect();
        let shape_weights = Array2::from_elem((1, n_channels), 1.0 / n_channels as f64);
        let mean_weights = Array2::from_elem((1, n_channels), 1.0 / n_channels as f64);

        // The backbone draws from its own stream so backbone identity is a
        // function of the seed alone, not of n_channels.
        let mut bb_rng = StdRng::seed_from_u64(config.seed ^ 0x66f0_ba5e_c0de_0001);
        let backbone = (0..config.backbone_layers)
            .map(|_| BackboneBlock {
                ln1_gamma: Array2::from_elem((1, d_bb), 1.0),
                ln1_beta: Array2::zeros((1, d_bb)),
                attn_q: Affine::glorot(&mut bb_rng, d_bb, d_bb, 1.0),
                attn_k: Affine::glorot(&mut bb_rng, d_bb, d_bb, 1.0),
                attn_v: Affine::glorot(&mut bb_rng, d_bb, d_bb, 1.0),
                attn_o: Affine::glorot(&mut bb_rng, d_bb, d_bb, 1.0),
                ln2_gamma: Array2::from_elem((1, d_bb), 1.0),
                ln2_beta: Array2::zeros((1, d_bb)),
                ff_in: Affine::glorot(&mut bb_rng, d_bb, config.backbone_ff_dim, 1.0),
                ff_out: Affine::glorot(&mut bb_rng, config.backbone_ff_dim, d_bb, 1.0),
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            n_channels,
            n_time,
            patch_embed,
            prototypes,
            reprogram,
            prefix,
            heads,
            shape_weights,
            mean_weights,
            backbone,
        })
    }

    pub fn n_patches(&self) -> usize {
        n_patches(self.n_time, self.config.patch_len, self.config.stride)
    }

    /// Flattened feature length per channel: `N_p * feature_dim`.
    pub fn flat_dim(&self) -> usize {
        self.n_patches() * self.config.feature_dim
    }

    /// Visits every trainable tensor in canonical name order.
    pub fn visit_trainable<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Array2<f64>)) {
        f("patch_embed.w", &self.patch_embed.w);
        f("patch_embed.b", &self.patch_embed.b);
        f("prototypes", &self.prototypes);
        f("reprogram.query.w", &self.reprogram.query.w);
        f("reprogram.query.b", &self.reprogram.query.b);
        f("reprogram.key.w", &self.reprogram.key.w);
        f("reprogram.key.b", &self.reprogram.key.b);
        f("reprogram.value.w", &self.reprogram.value.w);
        f("reprogram.value.b", &self.reprogram.value.b);
        f("reprogram.output.w", &self.reprogram.output.w);
        f("reprogram.output.b", &self.reprogram.output.b);
        if let Some(prefix) = &self.prefix {
            f("prefix.w", &prefix.w);
            f("prefix.b", &prefix.b);
        }
        for (i, head) in self.heads.iter().enumerate() {
            f(&format!("heads.{i}.shape.w"), &head.shape.w);
            f(&format!("heads.{i}.shape.b"), &head.shape.b);
            f(&format!("heads.{i}.mean.w"), &head.mean.w);
            f(&format!("heads.{i}.mean.b"), &head.mean.b);
        }
        f("aggregate.shape_weights", &self.shape_weights);
        f("aggregate.mean_weights", &self.mean_weights);
    }

    /// Mutable visit in the same canonical order as [`visit_trainable`].
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f("patch_embed.w", &mut self.patch_embed.w);
        f("patch_embed.b", &mut self.patch_embed.b);
        f("prototypes", &mut self.prototypes);
        f("reprogram.query.w", &mut self.reprogram.query.w);
        f("reprogram.query.b", &mut self.reprogram.query.b);
        f("reprogram.key.w", &mut self.reprogram.key.w);
        f("reprogram.key.b", &mut self.reprogram.key.b);
        f("reprogram.value.w", &mut self.reprogram.value.w);
        f("reprogram.value.b", &mut self.reprogram.value.b);
        f("reprogram.output.w", &mut self.reprogram.output.w);
        f("reprogram.output.b", &mut self.reprogram.output.b);
        if let Some(prefix) = &mut self.prefix {
            f("prefix.w", &mut prefix.w);
            f("prefix.b", &mut prefix.b);
        }
        for (i, head) in self.heads.iter_mut().enumerate() {
            f(&format!("heads.{i}.shape.w"), &mut head.shape.w);
            f(&format!("heads.{i}.shape.b"), &mut head.shape.b);
            f(&format!("heads.{i}.mean.w"), &mut head.mean.w);
            f(&format!("heads.{i}.mean.b"), &mut head.mean.b);
        }
        f("aggregate.shape_weights", &mut self.shape_weights);
        f("aggregate.mean_weights", &mut self.mean_weights);
    }

    /// Names of all trainable tensors in canonical order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_trainable(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// SHA-256 over the frozen backbone tensors in canonical order.
    pub fn backbone_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for block in &self.backbone {
            for tensor in [
                &block.ln1_gamma,
                &block.ln1_beta,
                &block.attn_q.w,
                &block.attn_q.b,
                &block.attn_k.w,
                &block.attn_k.b,
                &block.attn_v.w,
                &block.attn_v.b,
                &block.attn_o.w,
                &block.attn_o.b,
                &block.ln2_gamma,
                &block.ln2_beta,
                &block.ff_in.w,
                &block.ff_in.b,
                &block.ff_out.w,
                &block.ff_out.b,
            ] {
                for v in tensor.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex_string(&hasher.finalize())
    }

    /// SHA-256 over every tensor (trainable and frozen).
    pub fn full_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_trainable(&mut |_, tensor| {
            for v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.update(self.backbone_checksum().as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 3, 64).unwrap();
        let b = ModelParams::init(&cfg, 3, 64).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(
            &ModelConfig {
                seed: 1,
                ..cfg.clone()
            },
            3,
            64,
        )
        .unwrap();
        assert_ne!(a.patch_embed.w, c.patch_embed.w);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            stride: 20,
            patch_len: 16,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            feature_dim: 100,
            backbone_dim: 64,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            backbone_heads: 5,
            backbone_dim: 64,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trainable_names_are_unique_and_exclude_backbone() {
        let params = ModelParams::init(&ModelConfig::default(), 2, 64).unwrap();
        let names = params.trainable_names();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.iter().all(|n| !n.starts_with("backbone")));
    }

    #[test]
    fn backbone_checksum_ignores_trainable_changes() {
        let mut params = ModelParams::init(&ModelConfig::default(), 2, 64).unwrap();
        let before = params.backbone_checksum();
        params.patch_embed.w[[0, 0]] += 1.0;
        assert_eq!(before, params.backbone_checksum());
        params.backbone[0].attn_q.w[[0, 0]] += 1.0;
        assert_ne!(before, params.backbone_checksum());
    }
}
