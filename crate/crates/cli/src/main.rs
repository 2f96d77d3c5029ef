//! Batch front-end tying the pipeline together: generate, condition,
//! train, cross-validate, baseline, gradient-check, report.
//!
//! Exit codes: 0 success, 1 assertion/threshold failure, 2 usage or
//! config error. Every artifact-producing command writes exactly one
//! `manifest.json` next to its outputs, recording the command, the full
//! config snapshot, seeds, code version and timestamps so any result can
//! be re-derived.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use etchmap::conditioning::{
    ConditioningConfig, ConditioningPipeline, ConditioningReport, WaferExclusion, WaferPhase,
};
use etchmap::data::{load_dataset, split_lotwise_kfold, Dataset};
use etchmap::eval::{
    aggregate_metrics, global_mean_baseline, metrics, run_cv, CvConfig, CvReport, MetricAggregate,
    MetricSet,
};
use etchmap::model::{save_checkpoint, ModelConfig, ModelParams, Prediction};
use etchmap::synth::{generate_dataset, generate_runs, SynthConfig};
use etchmap::train::{grad_check, write_history_csv, GradCheckOptions, TrainConfig};

#[derive(Parser)]
#[command(name = "etchmap", version, about = "Wafer etch profile regression pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Gen(GenArgs),
    /// Fit channel selection and emit a conditioning report.
    Condition(ConditionArgs),
    /// Train one model on a full dataset and write a checkpoint.
    Train(TrainArgs),
    /// Lot-wise k-fold cross-validation of model vs baseline.
    Cv(CvArgs),
    /// Global-mean baseline cross-validation only.
    Baseline(BaselineArgs),
    /// Finite-difference check of all trainable gradients.
    Gradcheck(GradcheckArgs),
    /// Pretty-print a previously written cv_report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Synth config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConditionArgs {
    #[arg(long)]
    data: PathBuf,
    /// Conditioning config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    cond_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Master seed: sets model seed and train seed deterministically.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the mean-loss weight.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    cond_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated lambda candidates; enables per-fold validation.
    #[arg(long)]
    lambda_sweep: Option<String>,
    /// Fold-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Export per-wafer predictions as CSV files.
    #[arg(long, default_value_t = false)]
    predictions: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 200)]
    coords: usize,
    /// Negative control: corrupt one analytic gradient, expect exit 1.
    #[arg(long, default_value_t = false)]
    corrupt: bool,
    /// Optional directory for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
}

/// Error carrying the intended process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    let ds = load_dataset(path)
        .map_err(|e| CliError::usage(format!("cannot load dataset {}: {e}", path.display())))?;
    for ex in &ds.exclusions {
        eprintln!("excluded {}: {}", ex.wafer_dir, ex.reason);
    }
    Ok(ds)
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    timestamp_utc: String,
    seed: Option<u64>,
    config: serde_json::Value,
    outputs: Vec<String>,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: Option<u64>,
    config: serde_json::Value,
    outputs: &[&Path],
) -> CliResult<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_utc: chrono::Utc::now().to_rfc3339(),
        seed,
        config,
        outputs: outputs
            .iter()
            .map(|p| p.to_string_lossy().to_string())
            .collect(),
    };
    let path = out_dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::failure(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("report serializes"),
    )
    .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let mut config: SynthConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    ensure_dir(&args.out)?;
    let manifest = generate_dataset(&config, &args.out)
        .map_err(|e| CliError::usage(format!("generation failed: {e}")))?;
    let wafers: usize = manifest.lots.iter().map(|l| l.wafers.len()).sum();
    println!(
        "generated {} lots / {} wafers under {}",
        manifest.lots.len(),
        wafers,
        args.out.display()
    );
    write_manifest(
        &args.out,
        "gen",
        Some(config.seed),
        serde_json::to_value(&config).expect("config serializes"),
        &[&args.out.join("manifest.json")],
    )?;
    Ok(())
}

fn cmd_condition(args: ConditionArgs) -> CliResult<()> {
    let config: ConditioningConfig = load_config(&args.config)?;
    let ds = load_data(&args.data)?;
    let refs: Vec<&etchmap::data::WaferRun> = ds.runs.iter().collect();
    let pipeline = ConditioningPipeline::fit(&refs, &config)
        .map_err(|e| CliError::failure(format!("conditioning fit failed: {e}")))?;

    let mut per_wafer_phase = Vec::new();
    let mut exclusions = Vec::new();
    for run in &ds.runs {
        match pipeline.condition(run) {
            Ok(input) => per_wafer_phase.push(WaferPhase {
                lot_id: run.lot_id.clone(),
                wafer_index: run.wafer_index,
                phase_start: input.phase.0,
                phase_end: input.phase.1,
            }),
            Err(e) => exclusions.push(WaferExclusion {
                lot_id: run.lot_id.clone(),
                wafer_index: run.wafer_index,
                reason: e.to_string(),
            }),
        }
    }

    let kept_names: Vec<String> = pipeline
        .selection
        .kept_param_indices
        .iter()
        .map(|&i| ds.runs[0].params.names[i].clone())
        .collect();
    let kept_nm: Vec<f64> = pipeline
        .selection
        .kept_wavelength_indices
        .iter()
        .map(|&i| ds.runs[0].oes.wavelengths_nm[i])
        .collect();
    let report = ConditioningReport {
        config: config.clone(),
        kept_param_indices: pipeline.selection.kept_param_indices.clone(),
        kept_param_names: kept_names,
        kept_wavelength_indices: pipeline.selection.kept_wavelength_indices.clone(),
        kept_wavelengths_nm: kept_nm,
        wavelength_scores: pipeline.selection.scores.clone(),
        per_wafer_phase,
        exclusions,
    };

    ensure_dir(&args.out)?;
    let report_path = args.out.join("conditioning_report.json");
    write_json(&report_path, &report)?;
    println!(
        "kept {} param channels + {} OES bands -> {}",
        report.kept_param_indices.len(),
        report.kept_wavelength_indices.len(),
        report_path.display()
    );
    write_manifest(
        &args.out,
        "condition",
        None,
        serde_json::to_value(&config).expect("config serializes"),
        &[&report_path],
    )?;
    Ok(())
}

/// Master seed mapping: model and shuffle streams get distinct seeds.
fn apply_master_seed(model: &mut ModelConfig, train: &mut TrainConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        model.seed = s;
        train.seed = s.wrapping_add(1);
    }
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let cond: ConditioningConfig = load_config(&args.cond_config)?;
    let mut model_config: ModelConfig = load_config(&args.model_config)?;
    let mut train_config: TrainConfig = load_config(&args.train_config)?;
    apply_master_seed(&mut model_config, &mut train_config, args.seed);
    if let Some(lambda) = args.lambda {
        train_config.lambda = lambda;
    }
    model_config
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;

    let ds = load_data(&args.data)?;
    let refs: Vec<&etchmap::data::WaferRun> = ds.runs.iter().collect();
    let (_, params, history) =
        etchmap::eval::fit_on_runs(&refs, &cond, &model_config, &train_config)
            .map_err(|e| CliError::failure(format!("training failed: {e}")))?;

    ensure_dir(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.json");
    save_checkpoint(&ckpt_path, &params)
        .map_err(|e| CliError::failure(format!("cannot write checkpoint: {e}")))?;
    let history_path = args.out.join("history.csv");
    write_history_csv(&history_path, &history)
        .map_err(|e| CliError::failure(format!("cannot write history: {e}")))?;

    if let Some(last) = history.last() {
        println!(
            "trained {} epochs: shape {:.6} mean {:.6} total {:.6}",
            last.epoch, last.shape_loss, last.mean_loss, last.total
        );
    }
    let config = serde_json::json!({
        "conditioning": cond,
        "model": model_config,
        "train": train_config,
    });
    write_manifest(
        &args.out,
        "train",
        args.seed,
        config,
        &[&ckpt_path, &history_path],
    )?;
    Ok(())
}

fn metric_row(name: &str, agg: &MetricAggregate) -> String {
    format!(
        "{name:<22} {:>8.4} \u{b1} {:<8.4} {:>8.4} \u{b1} {:<8.4} {:>8.4} \u{b1} {:<8.4}",
        agg.mean.shape_mse,
        agg.std.shape_mse,
        agg.mean.mean_mse,
        agg.std.mean_mse,
        agg.mean.etch_mae,
        agg.std.etch_mae,
    )
}

fn print_cv_table(report: &CvReport) {
    println!(
        "{:<22} {:^19} {:^19} {:^19}",
        "predictor", "MSE (shape)", "MSE (mean)", "MAE (etch)"
    );
    println!("{}", metric_row("model", &report.model));
    println!("{}", metric_row("global-mean baseline", &report.baseline));
}

#[derive(Serialize, serde::Deserialize)]
struct CvReportFile {
    version: String,
    k: usize,
    seed: u64,
    conditioning: ConditioningConfig,
    model: ModelConfig,
    train: TrainConfig,
    report: CvReport,
}

fn cmd_cv(args: CvArgs) -> CliResult<()> {
    let cond: ConditioningConfig = load_config(&args.cond_config)?;
    let mut model_config: ModelConfig = load_config(&args.model_config)?;
    let mut train_config: TrainConfig = load_config(&args.train_config)?;
    apply_master_seed(&mut model_config, &mut train_config, args.seed);
    if let Some(lambda) = args.lambda {
        train_config.lambda = lambda;
    }
    model_config
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let lambda_sweep = match &args.lambda_sweep {
        None => None,
        Some(raw) => {
            let values: Result<Vec<f64>, _> =
                raw.split(',').map(|s| s.trim().parse::<f64>()).collect();
            Some(values.map_err(|_| {
                CliError::usage(format!("--lambda-sweep: cannot parse {raw:?} as floats"))
            })?)
        }
    };

    let ds = load_data(&args.data)?;
    let cv = CvConfig {
        k: args.k,
        seed: args.seed.unwrap_or(0).wrapping_add(2),
        jobs: args.jobs,
        lambda_sweep,
        keep_predictions: args.predictions,
    };
    let report = run_cv(&ds, &cond, &model_config, &train_config, &cv).map_err(|e| match &e {
        etchmap::eval::EvalError::Data(_) => CliError::usage(e.to_string()),
        _ => CliError::failure(e.to_string()),
    })?;

    ensure_dir(&args.out)?;
    if args.predictions {
        write_prediction_csvs(&args.out, &report)?;
    }
    let report_path = args.out.join("cv_report.json");
    let file = CvReportFile {
        version: env!("CARGO_PKG_VERSION").to_string(),
        k: args.k,
        seed: args.seed.unwrap_or(0),
        conditioning: cond.clone(),
        model: model_config.clone(),
        train: train_config.clone(),
        report,
    };
    write_json(&report_path, &file)?;
    print_cv_table(&file.report);
    println!("report -> {}", report_path.display());

    let config = serde_json::json!({
        "conditioning": cond,
        "model": model_config,
        "train": train_config,
        "cv": { "k": args.k, "jobs": args.jobs, "predictions": args.predictions },
    });
    write_manifest(&args.out, "cv", args.seed, config, &[&report_path])?;
    Ok(())
}

fn write_prediction_csvs(out: &Path, report: &CvReport) -> CliResult<()> {
    for fold in &report.folds {
        let Some(records) = &fold.predictions else {
            continue;
        };
        for rec in records {
            let dir = out.join("predictions").join(&rec.lot_id);
            ensure_dir(&dir)?;
            let mut text = String::from("x_mm,y_mm,depth_true,depth_pred\n");
            for (i, (x, y)) in rec.xy_mm.iter().enumerate() {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    x, y, rec.depth_true[i], rec.depth_pred[i]
                ));
            }
            let path = dir.join(format!("{}.csv", rec.wafer_index));
            fs::write(&path, text)
                .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> CliResult<()> {
    let ds = load_data(&args.data)?;
    let splits = split_lotwise_kfold(&ds, args.k, args.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;

    let mut per_fold: Vec<MetricSet> = Vec::new();
    for fold in &splits {
        let train: Vec<_> = ds
            .runs
            .iter()
            .filter(|r| fold.train_lot_ids.contains(&r.lot_id))
            .map(|r| r.profile.clone())
            .collect();
        let test: Vec<_> = ds
            .runs
            .iter()
            .filter(|r| fold.test_lot_ids.contains(&r.lot_id))
            .map(|r| r.profile.clone())
            .collect();
        let baseline =
            global_mean_baseline(&train).map_err(|e| CliError::failure(e.to_string()))?;
        let preds: Vec<Prediction> = test.iter().map(|_| baseline.predict()).collect();
        per_fold.push(metrics(&preds, &test).map_err(|e| CliError::failure(e.to_string()))?);
    }
    let aggregate = aggregate_metrics(&per_fold);

    println!(
        "{:<22} {:^19} {:^19} {:^19}",
        "predictor", "MSE (shape)", "MSE (mean)", "MAE (etch)"
    );
    println!("{}", metric_row("global-mean baseline", &aggregate));

    ensure_dir(&args.out)?;
    let report_path = args.out.join("baseline_report.json");
    write_json(
        &report_path,
        &serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "k": args.k,
            "seed": args.seed,
            "per_fold": per_fold,
            "aggregate": aggregate,
        }),
    )?;
    write_manifest(
        &args.out,
        "baseline",
        Some(args.seed),
        serde_json::json!({ "k": args.k }),
        &[&report_path],
    )?;
    Ok(())
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let mut model_config: ModelConfig = load_config(&args.model_config)?;
    model_config.seed = args.seed;
    model_config
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;

    // One synthetic wafer, conditioned with defaults, as the check sample.
    let synth = SynthConfig {
        n_lots: 1,
        wafers_per_lot: 1,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let (runs, _) = generate_runs(&synth).map_err(|e| CliError::failure(e.to_string()))?;
    let refs: Vec<&etchmap::data::WaferRun> = runs.iter().collect();
    let cond = ConditioningConfig::default();
    let pipeline = ConditioningPipeline::fit(&refs, &cond)
        .map_err(|e| CliError::failure(format!("conditioning failed: {e}")))?;
    let input = pipeline
        .condition(&runs[0])
        .map_err(|e| CliError::failure(format!("conditioning failed: {e}")))?;

    let (n_c, n_t) = input.matrix.dim();
    let params = ModelParams::init(&model_config, n_c, n_t)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let opts = GradCheckOptions {
        coords_per_tensor: args.coords,
        seed: args.seed,
        corrupt_tensor: args.corrupt.then(|| "patch_embed.w".to_string()),
        ..GradCheckOptions::default()
    };
    let report = grad_check(&params, &input, &runs[0].profile, 0.1, &opts)
        .map_err(|e| CliError::failure(e.to_string()))?;

    println!("{:<28} {:>14} {:>8}", "tensor", "max rel error", "coords");
    for t in &report.per_tensor {
        println!(
            "{:<28} {:>14.3e} {:>8}",
            t.name, t.max_rel_error, t.coords_checked
        );
    }
    println!(
        "overall max relative error: {:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})",
        report.max_rel_error
    );

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let report_path = out.join("gradcheck_report.json");
        write_json(&report_path, &report)?;
        write_manifest(
            out,
            "gradcheck",
            Some(args.seed),
            serde_json::to_value(&model_config).expect("config serializes"),
            &[&report_path],
        )?;
    }

    if report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(CliError::failure(format!(
            "gradient check failed: {:.3e} > {GRADCHECK_TOLERANCE:.0e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.input)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", args.input.display())))?;
    let file: CvReportFile = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid report {}: {e}", args.input.display())))?;
    println!(
        "cross-validation report (k = {}, seed = {}, version {})",
        file.k, file.seed, file.version
    );
    print_cv_table(&file.report);
    println!();
    println!(
        "{:<6} {:<18} {:>8} {:>12} {:>12} {:>12}",
        "fold", "test lots", "lambda", "shape MSE", "mean MSE", "etch MAE"
    );
    for fold in &file.report.folds {
        println!(
            "{:<6} {:<18} {:>8.3} {:>12.5} {:>12.5} {:>12.5}",
            fold.fold_index,
            fold.test_lot_ids.join(","),
            fold.lambda,
            fold.model_metrics.shape_mse,
            fold.model_metrics.mean_mse,
            fold.model_metrics.etch_mae,
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Condition(args) => cmd_condition(args),
        Command::Train(args) => cmd_train(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
