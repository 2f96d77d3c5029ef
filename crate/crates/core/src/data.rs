//! Dataset types, on-disk format, loading/validation and lot-wise splits.
//!
//! A dataset is a directory tree `<root>/<lot_id>/<wafer_index>/` where each
//! wafer directory holds:
//!
//! - `meta.json` — `{lot_id, wafer_index, sample_period_s}`
//! - `params.csv` — header row of channel names, one data row per sample
//! - `oes.csv` — header row of wavelengths in nm, one data row per sample
//! - `profile.csv` — header `x_mm,y_mm,depth_um`, exactly 89 data rows
//!
//! All numerics are decimal text. Values are written with Rust's shortest
//! round-trip float formatting, so a write/load cycle is value-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::PROFILE_POINTS;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}: row {line}: expected {expected} columns, got {got}")]
    MalformedRow {
        file: PathBuf,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{file}: row {line}, column {col}: non-finite or unparsable value")]
    NonFiniteValue {
        file: PathBuf,
        line: usize,
        col: usize,
    },
    #[error("profile has {got} points, expected {PROFILE_POINTS}")]
    ProfileCountMismatch { got: usize },
    #[error("params.csv has {params_rows} rows but oes.csv has {oes_rows}")]
    RowCountMismatch { params_rows: usize, oes_rows: usize },
    #[error("wavelength labels not strictly increasing at index {index}")]
    WavelengthOrder { index: usize },
    #[error("{file}: empty signal matrix")]
    EmptySignals { file: PathBuf },
    #[error("no valid wafer runs under {0}")]
    EmptyDataset(PathBuf),
    #[error("need at least {k} lots for {k}-fold split, found {lots}")]
    TooFewLots { lots: usize, k: usize },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("{file}: {source}")]
    Meta {
        file: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One measurement site on the wafer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub x_mm: f64,
    pub y_mm: f64,
    pub depth_um: f64,
}

/// Etch depth measured at exactly [`PROFILE_POINTS`] wafer locations.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialProfile {
    points: Vec<ProfilePoint>,
}

impl SpatialProfile {
    /// Validates the point count and finiteness of every field.
    pub fn new(points: Vec<ProfilePoint>) -> Result<Self, DataError> {
        if points.len() != PROFILE_POINTS {
            return Err(DataError::ProfileCountMismatch { got: points.len() });
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x_mm.is_finite() && p.y_mm.is_finite() && p.depth_um.is_finite()) {
                return Err(DataError::NonFiniteValue {
                    file: PathBuf::from("profile"),
                    line: i + 1,
                    col: 0,
                });
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[ProfilePoint] {
        &self.points
    }

    pub fn depths(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.depth_um).collect()
    }

    /// Wafer-level mean depth, the `m` component of the target decomposition.
    pub fn mean_depth(&self) -> f64 {
        self.points.iter().map(|p| p.depth_um).sum::<f64>() / PROFILE_POINTS as f64
    }

    /// Zero-mean spatial shape, the `s` component of the target decomposition.
    pub fn shape(&self) -> Vec<f64> {
        let m = self.mean_depth();
        self.points.iter().map(|p| p.depth_um - m).collect()
    }

    /// Site radii normalized by the maximum radius; all lie in [0, 1].
    pub fn normalized_radii(&self) -> Vec<f64> {
        let radii: Vec<f64> = self
            .points
            .iter()
            .map(|p| (p.x_mm * p.x_mm + p.y_mm * p.y_mm).sqrt())
            .collect();
        let max = radii.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return vec![0.0; radii.len()];
        }
        radii.iter().map(|r| r / max).collect()
    }
}

/// A named multichannel signal matrix, rows = samples, columns = channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

/// A spectral intensity matrix, rows = samples, columns = wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMatrix {
    pub wavelengths_nm: Vec<f64>,
    pub values: Array2<f64>,
}

/// One wafer's in-situ signals and measured depth profile.
#[derive(Debug, Clone, PartialEq)]
pub struct WaferRun {
    pub lot_id: String,
    pub wafer_index: usize,
    pub params: SignalMatrix,
    pub oes: SpectralMatrix,
    pub profile: SpatialProfile,
    pub sample_period_s: f64,
}

impl WaferRun {
    /// Column of a named process-parameter channel, if present.
    pub fn param_channel(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.params.names.iter().position(|n| n == name)?;
        Some(self.params.values.column(idx).to_vec())
    }
}

/// A wafer directory that failed validation and was excluded from a dataset.
#[derive(Debug, Clone, Serialize)]
pub struct Exclusion {
    pub lot_id: String,
    pub wafer_dir: String,
    pub reason: String,
}

/// All valid wafer runs under a dataset root, plus the exclusion report.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub runs: Vec<WaferRun>,
    pub exclusions: Vec<Exclusion>,
}

impl Dataset {
    /// Runs grouped by lot id, lot ids sorted, wafers sorted by index.
    pub fn lots(&self) -> BTreeMap<&str, Vec<&WaferRun>> {
        let mut map: BTreeMap<&str, Vec<&WaferRun>> = BTreeMap::new();
        for run in &self.runs {
            map.entry(run.lot_id.as_str()).or_default().push(run);
        }
        for wafers in map.values_mut() {
            wafers.sort_by_key(|r| r.wafer_index);
        }
        map
    }

    pub fn lot_ids(&self) -> Vec<String> {
        self.lots().keys().map(|s| s.to_string()).collect()
    }
}

/// One fold of a lot-wise k-fold split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_lot_ids: Vec<String>,
    pub test_lot_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WaferMeta {
    lot_id: String,
    wafer_index: usize,
    sample_period_s: f64,
}

fn parse_cell(raw: &str, file: &Path, line: usize, col: usize) -> Result<f64, DataError> {
    let v: f64 = raw.trim().parse().map_err(|_| DataError::NonFiniteValue {
        file: file.to_path_buf(),
        line,
        col,
    })?;
    if !v.is_finite() {
        return Err(DataError::NonFiniteValue {
            file: file.to_path_buf(),
            line,
            col,
        });
    }
    Ok(v)
}

/// Reads a headered CSV of floats: returns (header labels, row-major values).
fn read_csv_matrix(path: &Path) -> Result<(Vec<String>, Array2<f64>), DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io(io),
            _ => DataError::MissingFile(path.to_path_buf()),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|_| DataError::MissingFile(path.to_path_buf()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let ncols = header.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut nrows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|_| DataError::MalformedRow {
            file: path.to_path_buf(),
            line: i + 2,
            expected: ncols,
            got: 0,
        })?;
        if record.len() != ncols {
            return Err(DataError::MalformedRow {
                file: path.to_path_buf(),
                line: i + 2,
                expected: ncols,
                got: record.len(),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            rows.push(parse_cell(cell, path, i + 2, c)?);
        }
        nrows += 1;
    }
    if nrows == 0 {
        return Err(DataError::EmptySignals {
            file: path.to_path_buf(),
        });
    }
    let values = Array2::from_shape_vec((nrows, ncols), rows).expect("shape consistent");
    Ok((header, values))
}

/// Loads and validates a single wafer directory.
pub fn load_wafer_run(dir: &Path) -> Result<WaferRun, DataError> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(DataError::MissingFile(meta_path));
    }
    let meta: WaferMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|source| {
            DataError::Meta {
                file: meta_path.clone(),
                source,
            }
        })?;

    let (names, params) = read_csv_matrix(&dir.join("params.csv"))?;
    let (wl_labels, oes) = read_csv_matrix(&dir.join("oes.csv"))?;
    let oes_path = dir.join("oes.csv");
    let mut wavelengths_nm = Vec::with_capacity(wl_labels.len());
    for (c, label) in wl_labels.iter().enumerate() {
        wavelengths_nm.push(parse_cell(label, &oes_path, 1, c)?);
    }
    for i in 1..wavelengths_nm.len() {
        if wavelengths_nm[i] <= wavelengths_nm[i - 1] {
            return Err(DataError::WavelengthOrder { index: i });
        }
    }
    if params.nrows() != oes.nrows() {
        return Err(DataError::RowCountMismatch {
            params_rows: params.nrows(),
            oes_rows: oes.nrows(),
        });
    }

    let profile_path = dir.join("profile.csv");
    if !profile_path.is_file() {
        return Err(DataError::MissingFile(profile_path));
    }
    let (_, profile_values) = read_csv_matrix(&profile_path)?;
    if profile_values.ncols() != 3 {
        return Err(DataError::MalformedRow {
            file: profile_path,
            line: 1,
            expected: 3,
            got: profile_values.ncols(),
        });
    }
    let points: Vec<ProfilePoint> = profile_values
        .rows()
        .into_iter()
        .map(|r| ProfilePoint {
            x_mm: r[0],
            y_mm: r[1],
            depth_um: r[2],
        })
        .collect();
    let profile = SpatialProfile::new(points)?;

    Ok(WaferRun {
        lot_id: meta.lot_id,
        wafer_index: meta.wafer_index,
        params: SignalMatrix {
            names,
            values: params,
        },
        oes: SpectralMatrix {
            wavelengths_nm,
            values: oes,
        },
        profile,
        sample_period_s: meta.sample_period_s,
    })
}

/// Writes a wafer run in the on-disk format. Inverse of [`load_wafer_run`].
pub fn write_wafer_run(dir: &Path, run: &WaferRun) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let meta = WaferMeta {
        lot_id: run.lot_id.clone(),
        wafer_index: run.wafer_index,
        sample_period_s: run.sample_period_s,
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;

    write_csv(
        &dir.join("params.csv"),
        &run.params.names,
        &run.params.values,
    )?;
    let wl_header: Vec<String> = run
        .oes
        .wavelengths_nm
        .iter()
        .map(|w| format!("{w}"))
        .collect();
    write_csv(&dir.join("oes.csv"), &wl_header, &run.oes.values)?;

    let mut out = String::from("x_mm,y_mm,depth_um\n");
    for p in run.profile.points() {
        out.push_str(&format!("{},{},{}\n", p.x_mm, p.y_mm, p.depth_um));
    }
    fs::write(dir.join("profile.csv"), out)?;
    Ok(())
}

fn write_csv(path: &Path, header: &[String], values: &Array2<f64>) -> Result<(), DataError> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(file, "{}", header.join(","))?;
    for row in values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Loads every wafer directory under `root`, excluding invalid ones.
///
/// Wafers with missing or non-finite data are excluded (not imputed) and
/// reported in [`Dataset::exclusions`]. Lot and wafer directories are
/// visited in sorted order so the run order is deterministic.
pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let mut runs = Vec::new();
    let mut exclusions = Vec::new();

    let mut lot_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    lot_dirs.sort();

    for lot_dir in lot_dirs {
        let lot_id = lot_dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        let mut wafer_dirs: Vec<PathBuf> = fs::read_dir(&lot_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        wafer_dirs.sort_by_key(|p| {
            p.file_name()
                .and_then(|n| n.to_string_lossy().parse::<usize>().ok())
                .unwrap_or(usize::MAX)
        });
        for wafer_dir in wafer_dirs {
            match load_wafer_run(&wafer_dir) {
                Ok(run) => runs.push(run),
                Err(err) => exclusions.push(Exclusion {
                    lot_id: lot_id.clone(),
                    wafer_dir: wafer_dir.to_string_lossy().to_string(),
                    reason: err.to_string(),
                }),
            }
        }
    }

    if runs.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    Ok(Dataset { runs, exclusions })
}

/// Lot-wise k-fold split: lots are sorted, shuffled with the seeded
/// generator, and dealt round-robin into k folds. Every wafer of a lot
/// travels with its lot.
pub fn split_lotwise_kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<FoldSplit>, DataError> {
    if k < 2 {
        return Err(DataError::InvalidK(k));
    }
    let mut lot_ids = ds.lot_ids();
    if lot_ids.len() < k {
        return Err(DataError::TooFewLots {
            lots: lot_ids.len(),
            k,
        });
    }
    lot_ids.sort();
    let mut rng = StdRng::seed_from_u64(seed);
    lot_ids.shuffle(&mut rng);

    let all: Vec<String> = lot_ids.clone();
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, lot) in lot_ids.iter().enumerate() {
        folds[i % k].push(lot.clone());
    }

    Ok(folds
        .into_iter()
        .enumerate()
        .map(|(fold_index, mut test)| {
            test.sort();
            let mut train: Vec<String> =
                all.iter().filter(|l| !test.contains(l)).cloned().collect();
            train.sort();
            FoldSplit {
                fold_index,
                train_lot_ids: train,
                test_lot_ids: test,
            }
        })
        .collect())
}
