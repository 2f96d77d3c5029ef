//! Composite loss, reverse-mode gradients, the optimizer loop, and a
//! finite-difference gradient checker.
//!
//! The objective is the squared L2 norm of the shape error over the 89
//! sites plus `lambda` times the squared mean error, computed directly on
//! unnormalized micrometer values. Only the lightweight reprogramming and
//! projection tensors train; the backbone stays frozen (gradients flow
//! through it but are never applied to it).

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conditioning::ConditionedInput;
use crate::data::SpatialProfile;
use crate::model::{build_forward, ModelConfig, ModelError, ModelParams, Prediction};
use crate::PROFILE_POINTS;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("training loss diverged at epoch {epoch} (total = {total})")]
    DivergedLoss { epoch: usize, total: f64 },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimizer and objective settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight on the mean-error term of the objective.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 1e-3,
            epochs: 80,
            batch_size: 8,
            seed: 0,
            grad_clip: None,
        }
    }
}

/// The two objective terms and their weighted total, in square micrometers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub shape_loss: f64,
    pub mean_loss: f64,
    pub total: f64,
}

/// Target decomposition: zero-mean shape vector and scalar mean.
pub fn decompose_target(target: &SpatialProfile) -> (Vec<f64>, f64) {
    (target.shape(), target.mean_depth())
}

/// Objective on one wafer: sum of squared shape errors over the 89 sites
/// plus `lambda` times the squared mean error, in physical micrometers.
pub fn loss(pred: &Prediction, target: &SpatialProfile, lambda: f64) -> LossBreakdown {
    let (s, m) = decompose_target(target);
    let shape_loss: f64 = pred
        .shape
        .iter()
        .zip(&s)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mean_loss = (pred.mean - m) * (pred.mean - m);
    LossBreakdown {
        shape_loss,
        mean_loss,
        total: shape_loss + lambda * mean_loss,
    }
}

/// Loss nodes built on a forward tape.
struct LossVars {
    total: Var,
    shape: Var,
    mean: Var,
}

fn build_loss(
    tape: &mut Tape,
    shape_pred: Var,
    mean_pred: Var,
    target: &SpatialProfile,
    lambda: f64,
) -> LossVars {
    let (s, m) = decompose_target(target);
    let target_shape =
        tape.leaf(Array2::from_shape_vec((1, PROFILE_POINTS), s).expect("89-wide target"));
    let target_mean = tape.leaf(Array2::from_elem((1, 1), m));

    let ds = tape.sub(shape_pred, target_shape);
    let ds2 = tape.mul(ds, ds);
    let shape = tape.sum_all(ds2);

    let dm = tape.sub(mean_pred, target_mean);
    let mean = tape.mul(dm, dm);

    let weighted = tape.scale(mean, lambda);
    let total = tape.add(shape, weighted);
    LossVars { total, shape, mean }
}

/// Gradients for every trainable tensor, keyed by canonical tensor name.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

/// Forward + reverse pass on one sample. Returns the loss breakdown and
/// gradients for all trainable tensors; the frozen backbone gets none.
pub fn backward(
    params: &ModelParams,
    input: &ConditionedInput,
    target: &SpatialProfile,
    lambda: f64,
) -> Result<(LossBreakdown, Gradients), TrainError> {
    let mut tape = Tape::new();
    let build = build_forward(&mut tape, params, input)?;
    let loss_vars = build_loss(&mut tape, build.shape, build.mean, target, lambda);
    let grads = tape.backward(loss_vars.total);

    let mut tensors = BTreeMap::new();
    for (name, var) in &build.param_vars {
        let g = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.value(*var).dim()));
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
        tensors.insert(name.clone(), g);
    }

    let breakdown = LossBreakdown {
        shape_loss: tape.scalar(loss_vars.shape),
        mean_loss: tape.scalar(loss_vars.mean),
        total: tape.scalar(loss_vars.total),
    };
    Ok((breakdown, Gradients { tensors }))
}

/// Per-epoch mean losses over the training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub shape_loss: f64,
    pub mean_loss: f64,
    pub total: f64,
}

struct AdamState {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(params: &ModelParams) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        params.visit_trainable(&mut |name, tensor| {
            m.insert(name.to_string(), Array2::zeros(tensor.dim()));
            v.insert(name.to_string(), Array2::zeros(tensor.dim()));
        });
        Self { m, v, step: 0 }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Array2<f64>>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        params.visit_trainable_mut(&mut |name, tensor| {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("state initialized");
            let v = self.v.get_mut(name).expect("state initialized");
            for ((t, g), (m, v)) in tensor
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *t -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        });
    }
}

fn clip_gradients(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) {
    let norm_sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

/// Trains a freshly initialized model on the given samples.
///
/// Adam updates touch only the trainable tensors; the backbone checksum is
/// invariant under any number of steps. Deterministic for a fixed pair of
/// seeds (model init, sample shuffling).
pub fn fit(
    samples: &[(ConditionedInput, SpatialProfile)],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>), TrainError> {
    let first = samples.first().ok_or(TrainError::EmptyTrainSet)?;
    let (n_c, n_t) = first.0.matrix.dim();
    let params = ModelParams::init(model_config, n_c, n_t)?;
    fit_params(params, samples, train_config)
}

/// Trains an existing parameter set (consumed and returned).
pub fn fit_params(
    mut params: ModelParams,
    samples: &[(ConditionedInput, SpatialProfile)],
    train_config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut adam = AdamState::new(&params);
    let mut rng = StdRng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch_size = train_config.batch_size.max(1);
    let mut history = Vec::with_capacity(train_config.epochs);

    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_shape = 0.0;
        let mut epoch_mean = 0.0;
        let mut epoch_total = 0.0;

        for batch in order.chunks(batch_size) {
            let mut accum: Option<BTreeMap<String, Array2<f64>>> = None;
            for &idx in batch {
                let (input, target) = &samples[idx];
                let (breakdown, grads) = backward(&params, input, target, train_config.lambda)?;
                if !breakdown.total.is_finite() {
                    return Err(TrainError::DivergedLoss {
                        epoch,
                        total: breakdown.total,
                    });
                }
                epoch_shape += breakdown.shape_loss;
                epoch_mean += breakdown.mean_loss;
                epoch_total += breakdown.total;
                match &mut accum {
                    None => accum = Some(grads.tensors),
                    Some(acc) => {
                        for (name, g) in grads.tensors {
                            *acc.get_mut(&name).expect("same tensor set") += &g;
                        }
                    }
                }
            }
            let mut mean_grads = accum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in mean_grads.values_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            if let Some(clip) = train_config.grad_clip {
                clip_gradients(&mut mean_grads, clip);
            }
            adam.apply(&mut params, &mean_grads, train_config.lr);
        }

        let n = samples.len() as f64;
        history.push(EpochStats {
            epoch,
            shape_loss: epoch_shape / n,
            mean_loss: epoch_mean / n,
            total: epoch_total / n,
        });
    }
    Ok((params, history))
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Random coordinates sampled per tensor (all coordinates if fewer).
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Test hook: corrupt this tensor's analytic gradient before
    /// comparison, to prove the checker catches wrong gradients.
    pub corrupt_tensor: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 200,
            seed: 0,
            corrupt_tensor: None,
        }
    }
}

/// Per-tensor result of a gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

fn loss_value(
    params: &ModelParams,
    input: &ConditionedInput,
    target: &SpatialProfile,
    lambda: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let build = build_forward(&mut tape, params, input)?;
    let loss_vars = build_loss(&mut tape, build.shape, build.mean, target, lambda);
    Ok(tape.scalar(loss_vars.total))
}

/// Central finite differences on randomly sampled coordinates of every
/// trainable tensor, compared against the analytic reverse-mode gradient.
pub fn grad_check(
    params: &ModelParams,
    input: &ConditionedInput,
    target: &SpatialProfile,
    lambda: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    if opts.step <= 0.0 {
        return Err(TrainError::InvalidStep(opts.step));
    }
    let (breakdown, analytic) = backward(params, input, target, lambda)?;
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let names = params.trainable_names();
    let loss_scale = breakdown.total.abs().max(1.0);

    let mut per_tensor = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for name in names {
        let mut grad = analytic.tensors[&name].clone();
        if opts.corrupt_tensor.as_deref() == Some(name.as_str()) {
            grad.mapv_inplace(|v| 1.5 * v + 1.0);
        }
        let (rows, cols) = grad.dim();
        let total = rows * cols;
        let coords: Vec<usize> = if total <= opts.coords_per_tensor {
            (0..total).collect()
        } else {
            (0..opts.coords_per_tensor)
                .map(|_| rng.random_range(0..total))
                .collect()
        };

        // Denominator floor: entries below 1% of the tensor's peak
        // gradient, or below 1e-4 of the loss value, are measured against
        // those scales instead of their own magnitude. The difference
        // quotient cannot resolve anything finer than eps*|loss|/2h (a
        // softmax-invariant direction like the key bias has an exactly
        // zero gradient but nonzero f64 residue), while a wrong backward
        // formula still reads as an O(1) relative error.
        let g_scale = grad.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let floor = (1e-2 * g_scale).max(1e-4 * loss_scale).max(1e-12);

        let mut max_rel: f64 = 0.0;
        for &flat in &coords {
            let (r, c) = (flat / cols, flat % cols);
            let mut plus = params.clone();
            let mut minus = params.clone();
            perturb(&mut plus, &name, r, c, opts.step);
            perturb(&mut minus, &name, r, c, -opts.step);
            let f_plus = loss_value(&plus, input, target, lambda)?;
            let f_minus = loss_value(&minus, input, target, lambda)?;
            let fd = (f_plus - f_minus) / (2.0 * opts.step);
            let an = grad[[r, c]];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        per_tensor.push(TensorCheck {
            name,
            max_rel_error: max_rel,
            coords_checked: coords.len(),
        });
    }
    Ok(GradCheckReport {
        per_tensor,
        max_rel_error: overall,
    })
}

fn perturb(params: &mut ModelParams, name: &str, r: usize, c: usize, delta: f64) {
    params.visit_trainable_mut(&mut |n, tensor| {
        if n == name {
            tensor[[r, c]] += delta;
        }
    });
}

/// Writes the per-epoch loss history as CSV.
pub fn write_history_csv(path: &std::path::Path, history: &[EpochStats]) -> std::io::Result<()> {
    use std::io::Write as _;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,shape_loss,mean_loss,total")?;
    for e in history {
        writeln!(f, "{},{},{},{}", e.epoch, e.shape_loss, e.mean_loss, e.total)?;
    }
    Ok(())
}

/// Checksum of a loss history, for determinism assertions.
pub fn history_checksum(history: &[EpochStats]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for e in history {
        hasher.update(e.epoch.to_le_bytes());
        hasher.update(e.shape_loss.to_le_bytes());
        hasher.update(e.mean_loss.to_le_bytes());
        hasher.update(e.total.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
