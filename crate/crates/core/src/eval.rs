//! Evaluation: metrics, the global-mean baseline, and the lot-wise k-fold
//! cross-validation driver.
//!
//! Every fold refits channel selection on its training lots only before
//! conditioning the test lots, so no dataset-level statistic leaks across
//! the split. Folds are independent and may run on a thread pool; each
//! fold's training is internally deterministic, and results are merged in
//! fold order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionError, ConditionedInput, ConditioningConfig, ConditioningPipeline};
use crate::data::{split_lotwise_kfold, DataError, Dataset, SpatialProfile, WaferRun};
use crate::model::{forward, ModelConfig, ModelError, Prediction};
use crate::train::{fit, TrainConfig, TrainError};
use crate::PROFILE_POINTS;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("predictions ({preds}) and targets ({targets}) differ in length")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("empty training target set")]
    EmptyTrainSet,
    #[error("fold {fold}: no test wafers")]
    EmptyFold { fold: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("conditioning wafer {lot_id}/{wafer_index}: {source}")]
    Condition {
        lot_id: String,
        wafer_index: usize,
        source: ConditionError,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Paper-protocol metrics, all in physical micrometer units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// Mean over wafers of the mean over 89 sites of squared shape error.
    pub shape_mse: f64,
    /// Mean over wafers of squared mean error.
    pub mean_mse: f64,
    /// Mean absolute depth error over all wafers and sites.
    pub etch_mae: f64,
}

/// Computes the metric set for a batch of predictions.
pub fn metrics(preds: &[Prediction], targets: &[SpatialProfile]) -> Result<MetricSet, EvalError> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    let n = preds.len() as f64;
    let mut shape_mse = 0.0;
    let mut mean_mse = 0.0;
    let mut etch_mae = 0.0;
    for (pred, target) in preds.iter().zip(targets) {
        let depths = target.depths();
        let t_mean = target.mean_depth();
        let mut wafer_shape = 0.0;
        let mut wafer_mae = 0.0;
        for (j, d) in depths.iter().enumerate() {
            let s_true = d - t_mean;
            let ds = pred.shape[j] - s_true;
            wafer_shape += ds * ds;
            wafer_mae += (pred.depth[j] - d).abs();
        }
        shape_mse += wafer_shape / PROFILE_POINTS as f64;
        mean_mse += (pred.mean - t_mean) * (pred.mean - t_mean);
        etch_mae += wafer_mae / PROFILE_POINTS as f64;
    }
    Ok(MetricSet {
        shape_mse: shape_mse / n,
        mean_mse: mean_mse / n,
        etch_mae: etch_mae / n,
    })
}

/// Predicts the training-set grand-mean depth for every wafer: zero shape,
/// constant mean. Quantifies the value of spatial modeling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaselinePredictor {
    pub grand_mean: f64,
}

impl BaselinePredictor {
    pub fn predict(&self) -> Prediction {
        Prediction::constant(self.grand_mean)
    }
}

/// Fits the global-mean baseline: the grand mean over all training depths.
pub fn global_mean_baseline(
    train_targets: &[SpatialProfile],
) -> Result<BaselinePredictor, EvalError> {
    if train_targets.is_empty() {
        return Err(EvalError::EmptyTrainSet);
    }
    let total: f64 = train_targets
        .iter()
        .map(|t| t.depths().iter().sum::<f64>())
        .sum();
    let count = (train_targets.len() * PROFILE_POINTS) as f64;
    Ok(BaselinePredictor {
        grand_mean: total / count,
    })
}

/// Per-metric mean and standard deviation across folds (sample std).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: MetricSet,
    pub std: MetricSet,
}

/// Aggregates fold metrics into mean and sample standard deviation.
pub fn aggregate_metrics(folds: &[MetricSet]) -> MetricAggregate {
    let n = folds.len() as f64;
    let mean_of = |f: &dyn Fn(&MetricSet) -> f64| folds.iter().map(f).sum::<f64>() / n;
    let shape = mean_of(&|m: &MetricSet| m.shape_mse);
    let mmean = mean_of(&|m: &MetricSet| m.mean_mse);
    let mae = mean_of(&|m: &MetricSet| m.etch_mae);
    let std_of = |f: &dyn Fn(&MetricSet) -> f64, mu: f64| {
        if folds.len() < 2 {
            return 0.0;
        }
        (folds.iter().map(|m| (f(m) - mu) * (f(m) - mu)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MetricAggregate {
        mean: MetricSet {
            shape_mse: shape,
            mean_mse: mmean,
            etch_mae: mae,
        },
        std: MetricSet {
            shape_mse: std_of(&|m: &MetricSet| m.shape_mse, shape),
            mean_mse: std_of(&|m: &MetricSet| m.mean_mse, mmean),
            etch_mae: std_of(&|m: &MetricSet| m.etch_mae, mae),
        },
    }
}

/// One wafer's exported prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub lot_id: String,
    pub wafer_index: usize,
    pub xy_mm: Vec<(f64, f64)>,
    pub depth_true: Vec<f64>,
    pub depth_pred: Vec<f64>,
}

/// Everything measured on one fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub test_lot_ids: Vec<String>,
    /// Mean-loss weight used for this fold (fixed or sweep-selected).
    pub lambda: f64,
    pub model_metrics: MetricSet,
    pub baseline_metrics: MetricSet,
    pub kept_param_indices: Vec<usize>,
    pub kept_wavelength_indices: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<PredictionRecord>>,
}

/// Cross-validation report: per-fold results plus per-metric aggregates
/// for the model and the baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub model: MetricAggregate,
    pub baseline: MetricAggregate,
}

/// Cross-validation driver settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
    /// Seed for the lot shuffle that deals folds.
    pub seed: u64,
    /// Fold-level parallelism; `None` uses the global thread pool.
    pub jobs: Option<usize>,
    /// When set, each fold holds out one training lot and picks the lambda
    /// with the lowest validation etch MAE before the final fit.
    pub lambda_sweep: Option<Vec<f64>>,
    /// Export per-wafer predictions in the report.
    pub keep_predictions: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 9,
            seed: 0,
            jobs: None,
            lambda_sweep: None,
            keep_predictions: false,
        }
    }
}

fn condition_set(
    pipeline: &ConditioningPipeline,
    runs: &[&WaferRun],
) -> Result<Vec<(ConditionedInput, SpatialProfile)>, EvalError> {
    runs.iter()
        .map(|run| {
            let input = pipeline
                .condition(run)
                .map_err(|source| EvalError::Condition {
                    lot_id: run.lot_id.clone(),
                    wafer_index: run.wafer_index,
                    source,
                })?;
            Ok((input, run.profile.clone()))
        })
        .collect()
}

fn predict_set(
    params: &crate::model::ModelParams,
    inputs: &[(ConditionedInput, SpatialProfile)],
) -> Result<Vec<Prediction>, EvalError> {
    inputs
        .iter()
        .map(|(input, _)| forward(params, input).map_err(EvalError::from))
        .collect()
}

fn run_fold(
    ds: &Dataset,
    fold: &crate::data::FoldSplit,
    cond: &ConditioningConfig,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    cv: &CvConfig,
) -> Result<FoldResult, EvalError> {
    let train_runs: Vec<&WaferRun> = ds
        .runs
        .iter()
        .filter(|r| fold.train_lot_ids.contains(&r.lot_id))
        .collect();
    let test_runs: Vec<&WaferRun> = ds
        .runs
        .iter()
        .filter(|r| fold.test_lot_ids.contains(&r.lot_id))
        .collect();
    if test_runs.is_empty() || train_runs.is_empty() {
        return Err(EvalError::EmptyFold {
            fold: fold.fold_index,
        });
    }

    // Selection statistics come from training lots only.
    let pipeline = ConditioningPipeline::fit(&train_runs, cond)?;
    let train_set = condition_set(&pipeline, &train_runs)?;
    let test_set = condition_set(&pipeline, &test_runs)?;

    // Optional lambda selection on one held-out training lot.
    let lambda = match &cv.lambda_sweep {
        Some(candidates) if !candidates.is_empty() && fold.train_lot_ids.len() > 1 => {
            let val_lot = fold.train_lot_ids.iter().min().expect("non-empty");
            let inner_train: Vec<(ConditionedInput, SpatialProfile)> = train_set
                .iter()
                .filter(|(i, _)| &i.lot_id != val_lot)
                .cloned()
                .collect();
            let val_set: Vec<(ConditionedInput, SpatialProfile)> = train_set
                .iter()
                .filter(|(i, _)| &i.lot_id == val_lot)
                .cloned()
                .collect();
            let mut best = (f64::INFINITY, train_config.lambda);
            for &cand in candidates {
                let tc = TrainConfig {
                    lambda: cand,
                    ..train_config.clone()
                };
                let (params, _) = fit(&inner_train, model_config, &tc)?;
                let preds = predict_set(&params, &val_set)?;
                let targets: Vec<SpatialProfile> =
                    val_set.iter().map(|(_, t)| t.clone()).collect();
                let m = metrics(&preds, &targets)?;
                if m.etch_mae < best.0 {
                    best = (m.etch_mae, cand);
                }
            }
            best.1
        }
        _ => train_config.lambda,
    };

    let tc = TrainConfig {
        lambda,
        ..train_config.clone()
    };
    let (params, _) = fit(&train_set, model_config, &tc)?;
    let preds = predict_set(&params, &test_set)?;
    let targets: Vec<SpatialProfile> = test_set.iter().map(|(_, t)| t.clone()).collect();
    let model_metrics = metrics(&preds, &targets)?;

    let train_targets: Vec<SpatialProfile> =
        train_set.iter().map(|(_, t)| t.clone()).collect();
    let baseline = global_mean_baseline(&train_targets)?;
    let baseline_preds: Vec<Prediction> = targets.iter().map(|_| baseline.predict()).collect();
    let baseline_metrics = metrics(&baseline_preds, &targets)?;

    let predictions = cv.keep_predictions.then(|| {
        test_runs
            .iter()
            .zip(&preds)
            .map(|(run, pred)| PredictionRecord {
                lot_id: run.lot_id.clone(),
                wafer_index: run.wafer_index,
                xy_mm: run
                    .profile
                    .points()
                    .iter()
                    .map(|p| (p.x_mm, p.y_mm))
                    .collect(),
                depth_true: run.profile.depths(),
                depth_pred: pred.depth.clone(),
            })
            .collect()
    });

    Ok(FoldResult {
        fold_index: fold.fold_index,
        test_lot_ids: fold.test_lot_ids.clone(),
        lambda,
        model_metrics,
        baseline_metrics,
        kept_param_indices: pipeline.selection.kept_param_indices.clone(),
        kept_wavelength_indices: pipeline.selection.kept_wavelength_indices.clone(),
        predictions,
    })
}

/// Lot-wise k-fold cross-validation of the model against the global-mean
/// baseline. Per fold: refit conditioning on train lots, train, evaluate
/// both predictors on the held-out lots. Deterministic per seeds.
pub fn run_cv(
    ds: &Dataset,
    cond: &ConditioningConfig,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    cv: &CvConfig,
) -> Result<CvReport, EvalError> {
    let splits = split_lotwise_kfold(ds, cv.k, cv.seed)?;

    let fold_results: Vec<Result<FoldResult, EvalError>> = match cv.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .expect("thread pool");
            pool.install(|| {
                splits
                    .par_iter()
                    .map(|fold| run_fold(ds, fold, cond, model_config, train_config, cv))
                    .collect()
            })
        }
        None => splits
            .par_iter()
            .map(|fold| run_fold(ds, fold, cond, model_config, train_config, cv))
            .collect(),
    };

    let mut folds = Vec::with_capacity(fold_results.len());
    for result in fold_results {
        folds.push(result?);
    }
    folds.sort_by_key(|f| f.fold_index);

    let model = aggregate_metrics(&folds.iter().map(|f| f.model_metrics).collect::<Vec<_>>());
    let baseline =
        aggregate_metrics(&folds.iter().map(|f| f.baseline_metrics).collect::<Vec<_>>());
    Ok(CvReport {
        folds,
        model,
        baseline,
    })
}

/// The full stack for a single training split: fit conditioning on the
/// given runs, condition them, and train one model. Returns the fitted
/// pipeline, parameters, and history. Used by the CLI `train` command.
pub fn fit_on_runs(
    runs: &[&WaferRun],
    cond: &ConditioningConfig,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<
    (
        ConditioningPipeline,
        crate::model::ModelParams,
        Vec<crate::train::EpochStats>,
    ),
    EvalError,
> {
    let pipeline = ConditioningPipeline::fit(runs, cond)?;
    let samples = condition_set(&pipeline, runs)?;
    let (params, history) = fit(&samples, model_config, train_config)?;
    Ok((pipeline, params, history))
}

impl From<ConditionError> for EvalError {
    fn from(source: ConditionError) -> Self {
        EvalError::Condition {
            lot_id: String::new(),
            wafer_index: 0,
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ProfilePoint;
    use crate::synth::{generate_runs, SynthConfig};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn profile_from(depths: &[f64]) -> SpatialProfile {
        let pts = depths
            .iter()
            .enumerate()
            .map(|(i, d)| ProfilePoint {
                x_mm: i as f64,
                y_mm: 0.0,
                depth_um: *d,
            })
            .collect();
        SpatialProfile::new(pts).unwrap()
    }

    fn random_profile(rng: &mut StdRng) -> SpatialProfile {
        let depths: Vec<f64> = (0..PROFILE_POINTS)
            .map(|_| 30.0 + rng.random_range(-3.0..3.0))
            .collect();
        profile_from(&depths)
    }

    fn exact_prediction(target: &SpatialProfile) -> Prediction {
        let (s, m) = crate::train::decompose_target(target);
        Prediction {
            depth: s.iter().map(|v| v + m).collect(),
            shape: s,
            mean: m,
            per_channel: None,
        }
    }

    #[test]
    fn perfect_predictions_have_zero_metrics() {
        let mut rng = StdRng::seed_from_u64(1);
        let targets: Vec<SpatialProfile> = (0..4).map(|_| random_profile(&mut rng)).collect();
        let preds: Vec<Prediction> = targets.iter().map(exact_prediction).collect();
        let m = metrics(&preds, &targets).unwrap();
        assert_eq!(m.shape_mse, 0.0);
        assert_eq!(m.mean_mse, 0.0);
        assert_eq!(m.etch_mae, 0.0);
    }

    #[test]
    fn constant_offset_metrics() {
        let mut rng = StdRng::seed_from_u64(2);
        let targets: Vec<SpatialProfile> = (0..3).map(|_| random_profile(&mut rng)).collect();
        let c = 1.75;
        let preds: Vec<Prediction> = targets
            .iter()
            .map(|t| {
                let mut p = exact_prediction(t);
                p.mean += c;
                p.depth = p.shape.iter().map(|s| s + p.mean).collect();
                p
            })
            .collect();
        let m = metrics(&preds, &targets).unwrap();
        assert!(m.shape_mse.abs() < 1e-12);
        assert!((m.mean_mse - c * c).abs() < 1e-12);
        assert!((m.etch_mae - c).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_scalar_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let targets: Vec<SpatialProfile> = (0..5).map(|_| random_profile(&mut rng)).collect();
        let preds: Vec<Prediction> = (0..5)
            .map(|_| {
                let shape: Vec<f64> = (0..PROFILE_POINTS)
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect();
                let shape_mean = shape.iter().sum::<f64>() / PROFILE_POINTS as f64;
                let shape: Vec<f64> = shape.iter().map(|v| v - shape_mean).collect();
                let mean = rng.random_range(25.0..35.0);
                Prediction {
                    depth: shape.iter().map(|v| v + mean).collect(),
                    shape,
                    mean,
                    per_channel: None,
                }
            })
            .collect();
        let got = metrics(&preds, &targets).unwrap();

        // Scalar-loop oracle.
        let mut shape_acc = 0.0;
        let mut mean_acc = 0.0;
        let mut mae_acc = 0.0;
        for w in 0..5 {
            let depths = targets[w].depths();
            let tm = depths.iter().sum::<f64>() / PROFILE_POINTS as f64;
            let mut sw = 0.0;
            let mut aw = 0.0;
            for j in 0..PROFILE_POINTS {
                let st = depths[j] - tm;
                sw += (preds[w].shape[j] - st) * (preds[w].shape[j] - st);
                aw += (preds[w].depth[j] - depths[j]).abs();
            }
            shape_acc += sw / 89.0;
            mean_acc += (preds[w].mean - tm) * (preds[w].mean - tm);
            mae_acc += aw / 89.0;
        }
        assert!((got.shape_mse - shape_acc / 5.0).abs() < 1e-12);
        assert!((got.mean_mse - mean_acc / 5.0).abs() < 1e-12);
        assert!((got.etch_mae - mae_acc / 5.0).abs() < 1e-12);
    }

    #[test]
    fn metric_order_symmetry() {
        let mut rng = StdRng::seed_from_u64(4);
        let targets: Vec<SpatialProfile> = (0..4).map(|_| random_profile(&mut rng)).collect();
        let preds: Vec<Prediction> = targets
            .iter()
            .map(|t| {
                let mut p = exact_prediction(t);
                p.mean += rng.random_range(-1.0..1.0);
                p.depth = p.shape.iter().map(|s| s + p.mean).collect();
                p
            })
            .collect();
        let a = metrics(&preds, &targets).unwrap();
        let perm = [2, 0, 3, 1];
        let pp: Vec<Prediction> = perm.iter().map(|&i| preds[i].clone()).collect();
        let tp: Vec<SpatialProfile> = perm.iter().map(|&i| targets[i].clone()).collect();
        let b = metrics(&pp, &tp).unwrap();
        assert!((a.shape_mse - b.shape_mse).abs() < 1e-12);
        assert!((a.mean_mse - b.mean_mse).abs() < 1e-12);
        assert!((a.etch_mae - b.etch_mae).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut rng = StdRng::seed_from_u64(5);
        let targets: Vec<SpatialProfile> = (0..2).map(|_| random_profile(&mut rng)).collect();
        let preds = vec![exact_prediction(&targets[0])];
        match metrics(&preds, &targets) {
            Err(EvalError::LengthMismatch {
                preds: 1,
                targets: 2,
            }) => {}
            other => panic!("expected LengthMismatch, got {other:?}"),
        }
    }

    #[test]
    fn all_ten_micron_train_set_gives_mean_ten() {
        let targets: Vec<SpatialProfile> =
            (0..3).map(|_| profile_from(&[10.0; 89])).collect();
        let baseline = global_mean_baseline(&targets).unwrap();
        assert!((baseline.grand_mean - 10.0).abs() < 1e-12);
        let pred = baseline.predict();
        assert!(pred.shape.iter().all(|v| *v == 0.0));
        assert_eq!(pred.mean, 10.0);
    }

    #[test]
    fn empty_train_set_is_rejected() {
        match global_mean_baseline(&[]) {
            Err(EvalError::EmptyTrainSet) => {}
            other => panic!("expected EmptyTrainSet, got {other:?}"),
        }
    }

    #[test]
    fn baseline_shape_mse_is_spatial_variance_of_targets() {
        let mut rng = StdRng::seed_from_u64(6);
        let train: Vec<SpatialProfile> = (0..4).map(|_| random_profile(&mut rng)).collect();
        let test: Vec<SpatialProfile> = (0..3).map(|_| random_profile(&mut rng)).collect();
        let baseline = global_mean_baseline(&train).unwrap();
        let preds: Vec<Prediction> = test.iter().map(|_| baseline.predict()).collect();
        let m = metrics(&preds, &test).unwrap();

        // Closed form: zero shape prediction leaves the target's spatial
        // variance; mean error is (grand_mean - wafer_mean)^2.
        let mut want_shape = 0.0;
        let mut want_mean = 0.0;
        let mut want_mae = 0.0;
        for t in &test {
            let depths = t.depths();
            let tm = t.mean_depth();
            want_shape +=
                depths.iter().map(|d| (d - tm) * (d - tm)).sum::<f64>() / PROFILE_POINTS as f64;
            want_mean += (baseline.grand_mean - tm) * (baseline.grand_mean - tm);
            want_mae += depths
                .iter()
                .map(|d| (baseline.grand_mean - d).abs())
                .sum::<f64>()
                / PROFILE_POINTS as f64;
        }
        assert!((m.shape_mse - want_shape / 3.0).abs() < 1e-12);
        assert!((m.mean_mse - want_mean / 3.0).abs() < 1e-12);
        assert!((m.etch_mae - want_mae / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_recomputable_from_folds() {
        let folds = vec![
            MetricSet {
                shape_mse: 1.0,
                mean_mse: 2.0,
                etch_mae: 0.5,
            },
            MetricSet {
                shape_mse: 3.0,
                mean_mse: 4.0,
                etch_mae: 1.5,
            },
            MetricSet {
                shape_mse: 2.0,
                mean_mse: 0.0,
                etch_mae: 1.0,
            },
        ];
        let agg = aggregate_metrics(&folds);
        assert!((agg.mean.shape_mse - 2.0).abs() < 1e-12);
        assert!((agg.mean.mean_mse - 2.0).abs() < 1e-12);
        assert!((agg.mean.etch_mae - 1.0).abs() < 1e-12);
        assert!((agg.std.shape_mse - 1.0).abs() < 1e-12);
        assert!((agg.std.etch_mae - 0.5).abs() < 1e-12);
    }

    fn tiny_setup() -> (Dataset, ConditioningConfig, ModelConfig, TrainConfig) {
        let synth = SynthConfig {
            n_lots: 3,
            wafers_per_lot: 3,
            t_raw: 120,
            n_wl: 16,
            ..SynthConfig::default()
        };
        let (runs, _) = generate_runs(&synth).unwrap();
        let ds = Dataset {
            runs,
            exclusions: vec![],
        };
        let cond = ConditioningConfig {
            n_time: crate::conditioning::NTime(32),
            ..ConditioningConfig::default()
        };
        let model = ModelConfig {
            patch_len: 8,
            stride: 4,
            embed_dim: 6,
            attn_heads: 2,
            n_prototypes: 4,
            backbone_dim: 8,
            feature_dim: 4,
            prefix_len: 2,
            backbone_layers: 1,
            backbone_heads: 2,
            backbone_ff_dim: 12,
            seed: 0,
        };
        let train = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        (ds, cond, model, train)
    }

    #[test]
    fn cv_partitions_lots_and_aggregates_consistently() {
        let (ds, cond, model, train) = tiny_setup();
        let cv = CvConfig {
            k: 3,
            seed: 1,
            ..CvConfig::default()
        };
        let report = run_cv(&ds, &cond, &model, &train, &cv).unwrap();
        assert_eq!(report.folds.len(), 3);
        let mut tested: Vec<String> = report
            .folds
            .iter()
            .flat_map(|f| f.test_lot_ids.clone())
            .collect();
        tested.sort();
        assert_eq!(tested, ds.lot_ids());
        // Aggregate equals recomputation from fold metrics.
        let re = aggregate_metrics(
            &report
                .folds
                .iter()
                .map(|f| f.model_metrics)
                .collect::<Vec<_>>(),
        );
        assert!((re.mean.shape_mse - report.model.mean.shape_mse).abs() < 1e-12);
        assert!((re.std.etch_mae - report.model.std.etch_mae).abs() < 1e-12);
    }

    #[test]
    fn cv_is_deterministic_and_jobs_invariant() {
        let (ds, cond, model, train) = tiny_setup();
        let a = run_cv(
            &ds,
            &cond,
            &model,
            &train,
            &CvConfig {
                k: 3,
                seed: 2,
                jobs: Some(1),
                ..CvConfig::default()
            },
        )
        .unwrap();
        let b = run_cv(
            &ds,
            &cond,
            &model,
            &train,
            &CvConfig {
                k: 3,
                seed: 2,
                jobs: Some(3),
                ..CvConfig::default()
            },
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn selection_ignores_test_lot_perturbations() {
        let (ds, cond, model, train) = tiny_setup();
        let cv = CvConfig {
            k: 3,
            seed: 3,
            ..CvConfig::default()
        };
        let base = run_cv(&ds, &cond, &model, &train, &cv).unwrap();

        // Corrupt one wafer inside fold 0's test lot; the selection that
        // fold fitted (train lots only) must not move.
        let victim_lot = base.folds[0].test_lot_ids[0].clone();
        let mut perturbed = ds.clone();
        for run in perturbed.runs.iter_mut() {
            if run.lot_id == victim_lot {
                run.oes.values.mapv_inplace(|v| v * 3.0 + 17.0);
            }
        }
        let after = run_cv(&perturbed, &cond, &model, &train, &cv).unwrap();
        assert_eq!(
            base.folds[0].kept_param_indices,
            after.folds[0].kept_param_indices
        );
        assert_eq!(
            base.folds[0].kept_wavelength_indices,
            after.folds[0].kept_wavelength_indices
        );
    }

    #[test]
    fn too_few_lots_propagates() {
        let (ds, cond, model, train) = tiny_setup();
        match run_cv(
            &ds,
            &cond,
            &model,
            &train,
            &CvConfig {
                k: 20,
                ..CvConfig::default()
            },
        ) {
            Err(EvalError::Data(DataError::TooFewLots { lots: 3, k: 20 })) => {}
            other => panic!("expected TooFewLots, got {other:?}"),
        }
    }
}
