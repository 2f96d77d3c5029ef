//! Tape-based forward pass: graph builders for each stage plus the full
//! per-channel pipeline with aggregation.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::{patchify, ModelError, ModelParams, Prediction};
use crate::autodiff::{Tape, Var};
use crate::conditioning::{ChannelStats, ConditionedInput};

/// Var handles of an affine map on a tape.
#[derive(Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

/// Applies `x.w + b` with row-broadcast bias.
pub fn affine_graph(tape: &mut Tape, x: Var, map: AffineVars) -> Var {
    let y = tape.matmul(x, map.w);
    tape.add_row(y, map.b)
}

/// Linear patch embedding: `(N_p x L_p) -> (N_p x d_m)`, no nonlinearity.
pub fn embed_patches_graph(tape: &mut Tape, patches: Var, map: AffineVars) -> Var {
    affine_graph(tape, patches, map)
}

/// Var handles of the reprogramming attention maps.
#[derive(Clone, Copy)]
pub struct ReprogramVars {
    pub query: AffineVars,
    pub key: AffineVars,
    pub value: AffineVars,
    pub output: AffineVars,
}

/// Multi-head cross-attention from patch embeddings (queries) onto
/// prototypes (keys/values), concatenated heads mapped to the backbone
/// dimension. Returns the output and the per-head attention probability
/// nodes for diagnostics.
pub fn reprogram_graph(
    tape: &mut Tape,
    patch_emb: Var,
    prototypes: Var,
    maps: ReprogramVars,
    heads: usize,
    head_dim: usize,
) -> (Var, Vec<Var>) {
    let q = affine_graph(tape, patch_emb, maps.query);
    let k = affine_graph(tape, prototypes, maps.key);
    let v = affine_graph(tape, prototypes, maps.value);

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    let mut attn_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scaled);
        attn_probs.push(probs);
        head_outputs.push(tape.matmul(probs, vh));
    }
    let concat = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)
    };
    (affine_graph(tape, concat, maps.output), attn_probs)
}

/// Signed log compression keeps channel-scale statistics informative
/// without letting raw sensor magnitudes dominate the prefix embedding.
fn signed_log(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Numeric statistics vector for one channel, the prefix-map input.
pub fn stat_vector(stats: &ChannelStats, n_time: usize) -> Vec<f64> {
    let mut v = vec![
        signed_log(stats.mean),
        signed_log(stats.std),
        signed_log(stats.min),
        signed_log(stats.max),
        signed_log(stats.median),
        stats.trend_sign,
    ];
    for lag in stats.top_lags {
        v.push(lag as f64 / n_time as f64);
    }
    v
}

/// Maps a `1 x STAT_DIM` statistics vector to `prefix_len` prefix tokens
/// of width `dim`. `prefix_len == 0` yields no prefix.
pub fn prefix_graph(
    tape: &mut Tape,
    stats: Var,
    map: AffineVars,
    prefix_len: usize,
    dim: usize,
) -> Option<Var> {
    if prefix_len == 0 {
        return None;
    }
    let flat = affine_graph(tape, stats, map);
    Some(tape.reshape(flat, prefix_len, dim))
}

/// Var handles of one frozen backbone block.
#[derive(Clone, Copy)]
pub struct BackboneBlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn_q: AffineVars,
    pub attn_k: AffineVars,
    pub attn_v: AffineVars,
    pub attn_o: AffineVars,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ff_in: AffineVars,
    pub ff_out: AffineVars,
}

const LN_EPS: f64 = 1e-5;

/// Deterministic forward through pre-norm transformer blocks with
/// non-causal self-attention. Zero blocks is the identity.
pub fn backbone_graph(
    tape: &mut Tape,
    tokens: Var,
    blocks: &[BackboneBlockVars],
    heads: usize,
) -> (Var, Vec<Var>) {
    let mut x = tokens;
    let mut attn_probs = Vec::new();
    for block in blocks {
        let dim = tape.value(x).ncols();
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let normed = tape.layer_norm_rows(x, block.ln1_gamma, block.ln1_beta, LN_EPS);
        let q = affine_graph(tape, normed, block.attn_q);
        let k = affine_graph(tape, normed, block.attn_k);
        let v = affine_graph(tape, normed, block.attn_v);
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled);
            attn_probs.push(probs);
            head_outputs.push(tape.matmul(probs, vh));
        }
        let concat = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.concat_cols(&head_outputs)
        };
        let attn_out = affine_graph(tape, concat, block.attn_o);
        x = tape.add(x, attn_out);

        let normed2 = tape.layer_norm_rows(x, block.ln2_gamma, block.ln2_beta, LN_EPS);
        let hidden = affine_graph(tape, normed2, block.ff_in);
        let act = tape.gelu(hidden);
        let ff_out = affine_graph(tape, act, block.ff_out);
        x = tape.add(x, ff_out);
    }
    (x, attn_probs)
}

/// Drops the first `prefix_len` token rows, keeps the first `feature_dim`
/// columns of the rest, and flattens row-major to `1 x (N_p*feature_dim)`.
pub fn flatten_graph(
    tape: &mut Tape,
    backbone_out: Var,
    prefix_len: usize,
    feature_dim: usize,
) -> Var {
    let (rows, _) = tape.value(backbone_out).dim();
    let kept_rows = rows - prefix_len;
    let body = tape.slice_rows(backbone_out, prefix_len, rows);
    let features = tape.slice_cols(body, 0, feature_dim);
    tape.reshape(features, 1, kept_rows * feature_dim)
}

/// Channel-specific shape and mean heads: two independent affine maps.
pub fn project_heads_graph(
    tape: &mut Tape,
    flat: Var,
    shape_head: AffineVars,
    mean_head: AffineVars,
) -> (Var, Var) {
    (
        affine_graph(tape, flat, shape_head),
        affine_graph(tape, flat, mean_head),
    )
}

/// Aggregates per-channel head outputs with shared weights, re-centering
/// the combined shape to zero mean: the prediction's shape component.
pub fn aggregate_graph(
    tape: &mut Tape,
    per_channel: &[(Var, Var)],
    shape_weights: Var,
    mean_weights: Var,
) -> Result<(Var, Var), ModelError> {
    let expected = tape.value(shape_weights).ncols();
    if per_channel.len() != expected {
        return Err(ModelError::ChannelCountMismatch {
            expected,
            got: per_channel.len(),
        });
    }
    let shape_rows: Vec<Var> = per_channel.iter().map(|(s, _)| *s).collect();
    let mean_rows: Vec<Var> = per_channel.iter().map(|(_, m)| *m).collect();
    let stacked_shapes = tape.concat_rows(&shape_rows);
    let raw_shape = tape.matmul(shape_weights, stacked_shapes);
    let mu = tape.mean_all(raw_shape);
    let shape = tape.sub_scalar(raw_shape, mu);

    let stacked_means = tape.concat_rows(&mean_rows);
    let mean = tape.matmul(mean_weights, stacked_means);
    Ok((shape, mean))
}

/// A fully built forward graph with handles to its outputs, parameter
/// leaves, and attention probability nodes.
pub struct ForwardBuild {
    pub shape: Var,
    pub mean: Var,
    pub per_channel: Vec<(Var, Var)>,
    pub param_vars: BTreeMap<String, Var>,
    pub attention_probs: Vec<Var>,
}

/// Builds the full forward graph for one conditioned wafer on `tape`.
pub fn build_forward(
    tape: &mut Tape,
    params: &ModelParams,
    input: &ConditionedInput,
) -> Result<ForwardBuild, ModelError> {
    let cfg = &params.config;
    let (n_c, n_t) = input.matrix.dim();
    if n_c != params.n_channels || n_t != params.n_time {
        return Err(ModelError::ShapeMismatch {
            context: "conditioned input",
            expected: format!("{} x {}", params.n_channels, params.n_time),
            got: format!("{n_c} x {n_t}"),
        });
    }
    if input.stats.channels.len() != n_c {
        return Err(ModelError::ShapeMismatch {
            context: "channel statistics",
            expected: format!("{n_c}"),
            got: format!("{}", input.stats.channels.len()),
        });
    }

    // Trainable parameter leaves, keyed by canonical tensor name.
    let mut param_vars: BTreeMap<String, Var> = BTreeMap::new();
    params.visit_trainable(&mut |name, tensor| {
        param_vars.insert(name.to_string(), tape.leaf(tensor.clone()));
    });
    let lookup = |name: &str| -> AffineVars {
        AffineVars {
            w: param_vars[&format!("{name}.w")],
            b: param_vars[&format!("{name}.b")],
        }
    };
    let embed_map = lookup("patch_embed");
    let reprogram_maps = ReprogramVars {
        query: lookup("reprogram.query"),
        key: lookup("reprogram.key"),
        value: lookup("reprogram.value"),
        output: lookup("reprogram.output"),
    };
    let prototypes = param_vars["prototypes"];
    let prefix_map = params.prefix.as_ref().map(|_| lookup("prefix"));
    let shape_weights = param_vars["aggregate.shape_weights"];
    let mean_weights = param_vars["aggregate.mean_weights"];

    // Frozen backbone leaves: on the tape (gradients flow through them to
    // upstream trainables) but never registered as trainable.
    let block_vars: Vec<BackboneBlockVars> = params
        .backbone
        .iter()
        .map(|b| BackboneBlockVars {
            ln1_gamma: tape.leaf(b.ln1_gamma.clone()),
            ln1_beta: tape.leaf(b.ln1_beta.clone()),
            attn_q: AffineVars {
                w: tape.leaf(b.attn_q.w.clone()),
                b: tape.leaf(b.attn_q.b.clone()),
            },
            attn_k: AffineVars {
                w: tape.leaf(b.attn_k.w.clone()),
                b: tape.leaf(b.attn_k.b.clone()),
            },
            attn_v: AffineVars {
                w: tape.leaf(b.attn_v.w.clone()),
                b: tape.leaf(b.attn_v.b.clone()),
            },
            attn_o: AffineVars {
                w: tape.leaf(b.attn_o.w.clone()),
                b: tape.leaf(b.attn_o.b.clone()),
            },
            ln2_gamma: tape.leaf(b.ln2_gamma.clone()),
            ln2_beta: tape.leaf(b.ln2_beta.clone()),
            ff_in: AffineVars {
                w: tape.leaf(b.ff_in.w.clone()),
                b: tape.leaf(b.ff_in.b.clone()),
            },
            ff_out: AffineVars {
                w: tape.leaf(b.ff_out.w.clone()),
                b: tape.leaf(b.ff_out.b.clone()),
            },
        })
        .collect();

    let mut per_channel = Vec::with_capacity(n_c);
    let mut attention_probs = Vec::new();
    for c in 0..n_c {
        let series = input.matrix.row(c).to_vec();
        let patches = patchify(&series, cfg.patch_len, cfg.stride)?;
        let patches_var = tape.leaf(patches);
        let emb = embed_patches_graph(tape, patches_var, embed_map);
        let (reprogrammed, mut probs) = reprogram_graph(
            tape,
            emb,
            prototypes,
            reprogram_maps,
            cfg.attn_heads,
            cfg.head_dim(),
        );
        attention_probs.append(&mut probs);

        let tokens = match prefix_map {
            Some(map) if cfg.prefix_len > 0 => {
                let stats = stat_vector(&input.stats.channels[c], n_t);
                let stats_var = tape.leaf(
                    Array2::from_shape_vec((1, stats.len()), stats).expect("stat vector shape"),
                );
                let prefix =
                    prefix_graph(tape, stats_var, map, cfg.prefix_len, cfg.backbone_dim)
                        .expect("prefix_len > 0");
                tape.concat_rows(&[prefix, reprogrammed])
            }
            _ => reprogrammed,
        };

        let (backbone_out, mut bb_probs) =
            backbone_graph(tape, tokens, &block_vars, cfg.backbone_heads);
        attention_probs.append(&mut bb_probs);

        let flat = flatten_graph(tape, backbone_out, cfg.prefix_len, cfg.feature_dim);
        let head = &params.heads[c];
        debug_assert_eq!(head.shape.w.nrows(), tape.value(flat).ncols());
        let shape_head = AffineVars {
            w: param_vars[&format!("heads.{c}.shape.w")],
            b: param_vars[&format!("heads.{c}.shape.b")],
        };
        let mean_head = AffineVars {
            w: param_vars[&format!("heads.{c}.mean.w")],
            b: param_vars[&format!("heads.{c}.mean.b")],
        };
        per_channel.push(project_heads_graph(tape, flat, shape_head, mean_head));
    }

    let (shape, mean) = aggregate_graph(tape, &per_channel, shape_weights, mean_weights)?;
    Ok(ForwardBuild {
        shape,
        mean,
        per_channel,
        param_vars,
        attention_probs,
    })
}

/// Runs the forward pass and extracts a [`Prediction`].
pub fn forward(params: &ModelParams, input: &ConditionedInput) -> Result<Prediction, ModelError> {
    let mut tape = Tape::new();
    let build = build_forward(&mut tape, params, input)?;
    let shape = tape.value(build.shape).row(0).to_vec();
    let mean = tape.scalar(build.mean);
    let depth: Vec<f64> = shape.iter().map(|s| s + mean).collect();
    let per_channel = build
        .per_channel
        .iter()
        .map(|(s, m)| (tape.value(*s).row(0).to_vec(), tape.scalar(*m)))
        .collect();
    Ok(Prediction {
        shape,
        mean,
        depth,
        per_channel: Some(per_channel),
    })
}
