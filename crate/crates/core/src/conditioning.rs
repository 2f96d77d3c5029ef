//! Signal conditioning: turns raw wafer runs into fixed-size normalized
//! model inputs.
//!
//! The pipeline has two phases. Dataset-level selection first: low-variance
//! process parameters are dropped, OES wavelengths are scored by temporal
//! variability and picked top-k with non-maximum suppression along the
//! wavelength axis. Per-wafer conditioning then detects the active etch
//! phase from trigger channels, slices and resamples every selected channel
//! onto a fixed time grid, and applies per-channel instance normalization.
//! Selection must be fit on training wafers only; [`ConditioningPipeline`]
//! owns that contract.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::WaferRun;

/// Floor applied to per-channel standard deviations before dividing, so
/// constant channels normalize to zeros instead of blowing up.
pub const STD_FLOOR: f64 = 1e-8;

/// Number of autocorrelation lags retained in the per-channel statistics.
pub const TOP_LAGS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ConditionError {
    #[error("runs disagree on parameter channel names")]
    InconsistentChannels,
    #[error("runs disagree on the OES wavelength grid")]
    GridMismatch,
    #[error("no runs provided")]
    EmptyRuns,
    #[error("trigger channel {0:?} not present")]
    MissingTriggerChannel(String),
    #[error("no sample passes the activity threshold on all trigger channels")]
    NoActivePhase,
    #[error("active phase [{start}, {end}) too short to resample")]
    PhaseTooShort { start: usize, end: usize },
    #[error("non-finite value in conditioned matrix")]
    NonFinite,
}

/// Dataset-level channel selection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Keep a parameter channel iff its best per-wafer std exceeds this
    /// fraction of the global maximum std.
    pub variance_epsilon: f64,
    /// Number of OES wavelengths to select.
    pub top_k: usize,
    /// Minimum wavelength distance between selected OES bands.
    pub nms_window_nm: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            variance_epsilon: 1e-4,
            top_k: 6,
            nms_window_nm: 30.0,
        }
    }
}

/// Active-phase detector settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    /// Channels that directly reflect chamber operation.
    pub trigger_channels: Vec<String>,
    /// A sample is active when above this fraction of the channel maximum.
    pub threshold_frac: f64,
    /// Inactive gaps up to this many samples are bridged.
    pub max_gap: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            trigger_channels: vec!["gas_flow".into(), "rf_power".into()],
            threshold_frac: 0.1,
            max_gap: 5,
        }
    }
}

/// Full conditioning configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    pub selection: SelectionConfig,
    pub phase: PhaseConfig,
    /// Fixed model input length each channel is resampled to.
    pub n_time: NTime,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NTime(pub usize);

impl Default for NTime {
    fn default() -> Self {
        NTime(64)
    }
}

/// Result of dataset-level channel selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub kept_param_indices: Vec<usize>,
    pub kept_wavelength_indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub config: SelectionConfig,
}

impl ChannelSelection {
    pub fn n_params(&self) -> usize {
        self.kept_param_indices.len()
    }

    pub fn n_oes(&self) -> usize {
        self.kept_wavelength_indices.len()
    }

    /// Total model channel count `N_c`.
    pub fn n_channels(&self) -> usize {
        self.n_params() + self.n_oes()
    }
}

/// Per-channel statistics recorded at normalization time. The mean/std pair
/// is the normalization applied; the rest summarize the raw and normalized
/// series for the prefix encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    /// Standard deviation after flooring, the value actually divided by.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    /// Sign of the least-squares slope of the raw series: -1, 0 or +1.
    pub trend_sign: f64,
    /// Lags (1-based) of the five largest absolute autocorrelations of the
    /// normalized series, zero-padded when the series is short.
    pub top_lags: [usize; TOP_LAGS],
}

/// Normalization and prompt statistics for every channel of one wafer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<ChannelStats>,
}

/// A fixed-size normalized model input for one wafer.
#[derive(Debug, Clone)]
pub struct ConditionedInput {
    /// `N_c x N_T`, rows are channels.
    pub matrix: Array2<f64>,
    pub stats: NormStats,
    /// Detected active phase in raw sample indices, half-open.
    pub phase: (usize, usize),
    pub lot_id: String,
    pub wafer_index: usize,
}

fn std_of(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    (series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Keeps parameter channel `i` iff its maximum per-wafer std exceeds
/// `eps x (largest std over all channels and wafers)`. Order preserved.
pub fn filter_low_variance_params(
    runs: &[&WaferRun],
    eps: f64,
) -> Result<Vec<usize>, ConditionError> {
    let first = runs.first().ok_or(ConditionError::EmptyRuns)?;
    let names = &first.params.names;
    for run in runs {
        if &run.params.names != names {
            return Err(ConditionError::InconsistentChannels);
        }
    }

    let n_ch = names.len();
    let mut max_std_per_channel = vec![0.0f64; n_ch];
    for run in runs {
        for (c, best) in max_std_per_channel.iter_mut().enumerate() {
            let col = run.params.values.column(c).to_vec();
            *best = best.max(std_of(&col));
        }
    }
    let global_max = max_std_per_channel.iter().cloned().fold(0.0, f64::max);
    Ok((0..n_ch)
        .filter(|&c| max_std_per_channel[c] > eps * global_max)
        .collect())
}

/// Scores every OES wavelength by temporal variability: the wafer-wise
/// median of the per-cycle std and of the mean absolute temporal
/// difference, each min-max normalized across wavelengths, then averaged.
pub fn score_oes_wavelengths(runs: &[&WaferRun]) -> Result<Vec<f64>, ConditionError> {
    let first = runs.first().ok_or(ConditionError::EmptyRuns)?;
    let grid = &first.oes.wavelengths_nm;
    for run in runs {
        if &run.oes.wavelengths_nm != grid {
            return Err(ConditionError::GridMismatch);
        }
    }

    let n_wl = grid.len();
    let mut s1 = Vec::with_capacity(n_wl);
    let mut s2 = Vec::with_capacity(n_wl);
    for w in 0..n_wl {
        let mut stds = Vec::with_capacity(runs.len());
        let mut diffs = Vec::with_capacity(runs.len());
        for run in runs {
            let col = run.oes.values.column(w).to_vec();
            stds.push(std_of(&col));
            let mad = if col.len() > 1 {
                col.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>() / (col.len() - 1) as f64
            } else {
                0.0
            };
            diffs.push(mad);
        }
        s1.push(median_of(&mut stds));
        s2.push(median_of(&mut diffs));
    }

    let minmax = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo == 0.0 {
            return vec![0.0; v.len()];
        }
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    };
    let s1n = minmax(&s1);
    let s2n = minmax(&s2);
    Ok((0..n_wl).map(|i| 0.5 * (s1n[i] + s2n[i])).collect())
}

/// Greedy top-k with non-maximum suppression along the wavelength axis.
///
/// Candidates are visited in descending score order (ties broken by lower
/// wavelength); one is suppressed when it lies within `window_nm` of any
/// already-selected wavelength. Returns ascending indices, possibly fewer
/// than `k` when suppression exhausts the candidates.
pub fn select_topk_nms(
    scores: &[f64],
    wavelengths_nm: &[f64],
    k: usize,
    window_nm: f64,
) -> Vec<usize> {
    assert_eq!(scores.len(), wavelengths_nm.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(wavelengths_nm[a].partial_cmp(&wavelengths_nm[b]).unwrap())
    });

    let mut selected: Vec<usize> = Vec::new();
    for idx in order {
        if selected.len() == k {
            break;
        }
        let suppressed = selected
            .iter()
            .any(|&s| (wavelengths_nm[idx] - wavelengths_nm[s]).abs() < window_nm);
        if !suppressed {
            selected.push(idx);
        }
    }
    selected.sort_unstable();
    selected
}

/// Fits the full channel selection on a set of runs.
pub fn select_channels(
    runs: &[&WaferRun],
    config: &SelectionConfig,
) -> Result<ChannelSelection, ConditionError> {
    let kept_param_indices = filter_low_variance_params(runs, config.variance_epsilon)?;
    let scores = score_oes_wavelengths(runs)?;
    let grid = &runs[0].oes.wavelengths_nm;
    let kept_wavelength_indices = select_topk_nms(&scores, grid, config.top_k, config.nms_window_nm);
    Ok(ChannelSelection {
        kept_param_indices,
        kept_wavelength_indices,
        scores,
        config: config.clone(),
    })
}

/// Detects the active etch phase as the longest interval during which all
/// trigger channels sit above `threshold_frac` of their own maximum, with
/// inactive gaps up to `max_gap` samples bridged. Returns a half-open
/// sample range; ties go to the earliest start.
pub fn detect_active_phase(
    run: &WaferRun,
    config: &PhaseConfig,
) -> Result<(usize, usize), ConditionError> {
    let t = run.params.values.nrows();
    let mut joint = vec![true; t];
    for name in &config.trigger_channels {
        let col = run
            .param_channel(name)
            .ok_or_else(|| ConditionError::MissingTriggerChannel(name.clone()))?;
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let thresh = config.threshold_frac * max;
        for (i, v) in col.iter().enumerate() {
            joint[i] = joint[i] && *v > thresh;
        }
    }

    // Collect active runs, then merge across gaps <= max_gap.
    let mut runs_active: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < t {
        if joint[i] {
            let start = i;
            while i < t && joint[i] {
                i += 1;
            }
            runs_active.push((start, i));
        } else {
            i += 1;
        }
    }
    if runs_active.is_empty() {
        return Err(ConditionError::NoActivePhase);
    }

    let mut merged: Vec<(usize, usize)> = vec![runs_active[0]];
    for &(s, e) in &runs_active[1..] {
        let last = merged.last_mut().unwrap();
        if s - last.1 <= config.max_gap {
            last.1 = e;
        } else {
            merged.push((s, e));
        }
    }

    // Longest interval, earliest start on ties.
    let best = merged
        .iter()
        .max_by(|a, b| (a.1 - a.0).cmp(&(b.1 - b.0)).then(b.0.cmp(&a.0)))
        .copied()
        .unwrap();
    Ok(best)
}

/// Piecewise-linear resampling of `series[start..end]` onto `n` equispaced
/// points spanning the slice; both endpoint values are preserved exactly.
fn resample_linear(series: &[f64], start: usize, end: usize, n: usize) -> Vec<f64> {
    debug_assert!(end - start >= 2 && n >= 2);
    let last = (end - start - 1) as f64;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let pos = last * j as f64 / (n - 1) as f64;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let v = if frac == 0.0 {
            series[start + i0]
        } else {
            series[start + i0] * (1.0 - frac) + series[start + i0 + 1] * frac
        };
        out.push(v);
    }
    out
}

/// Stacks the selected parameter channels then the selected OES channels,
/// each sliced to the active phase and linearly resampled to `n_time`
/// points.
pub fn align_and_resample(
    run: &WaferRun,
    selection: &ChannelSelection,
    phase: (usize, usize),
    n_time: usize,
) -> Result<Array2<f64>, ConditionError> {
    let (start, end) = phase;
    if end - start < 2 || n_time < 2 {
        return Err(ConditionError::PhaseTooShort { start, end });
    }
    let n_c = selection.n_channels();
    let mut matrix = Array2::zeros((n_c, n_time));
    let mut row = 0;
    for &p in &selection.kept_param_indices {
        let col = run.params.values.column(p).to_vec();
        let res = resample_linear(&col, start, end, n_time);
        for (j, v) in res.iter().enumerate() {
            matrix[[row, j]] = *v;
        }
        row += 1;
    }
    for &w in &selection.kept_wavelength_indices {
        let col = run.oes.values.column(w).to_vec();
        let res = resample_linear(&col, start, end, n_time);
        for (j, v) in res.iter().enumerate() {
            matrix[[row, j]] = *v;
        }
        row += 1;
    }
    Ok(matrix)
}

fn channel_stats(raw: &[f64]) -> ChannelStats {
    let n = raw.len();
    let nf = n as f64;
    let mean = raw.iter().sum::<f64>() / nf;
    let std_raw = std_of(raw);
    let std = std_raw.max(STD_FLOOR);
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let median = median_of(&mut raw.to_vec());

    // Least-squares slope of value against sample index.
    let tbar = (nf - 1.0) / 2.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, v) in raw.iter().enumerate() {
        let dt = t as f64 - tbar;
        num += dt * (v - mean);
        den += dt * dt;
    }
    let slope = if den > 0.0 { num / den } else { 0.0 };
    let trend_sign = if slope > 0.0 {
        1.0
    } else if slope < 0.0 {
        -1.0
    } else {
        0.0
    };

    // Autocorrelation of the normalized (zero-mean, unit-std) series over
    // lags 1..n/2; keep the five largest by absolute value.
    let normed: Vec<f64> = raw.iter().map(|v| (v - mean) / std).collect();
    let denom: f64 = normed.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    let max_lag = n / 2;
    let mut acf: Vec<(usize, f64)> = (1..=max_lag)
        .map(|lag| {
            let c: f64 = (0..n - lag).map(|t| normed[t] * normed[t + lag]).sum();
            (lag, (c / denom).abs())
        })
        .collect();
    acf.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut top_lags = [0usize; TOP_LAGS];
    for (slot, (lag, _)) in acf.iter().take(TOP_LAGS).enumerate() {
        top_lags[slot] = *lag;
    }

    ChannelStats {
        mean,
        std,
        min,
        max,
        median,
        trend_sign,
        top_lags,
    }
}

/// Per-channel instance normalization: `x -> (x - mean) / max(std, floor)`.
/// Statistics are computed over the whole resampled window and retained;
/// no inverse transform is applied anywhere downstream.
pub fn normalize_instance(
    raw: &Array2<f64>,
    phase: (usize, usize),
    lot_id: &str,
    wafer_index: usize,
) -> Result<ConditionedInput, ConditionError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(ConditionError::NonFinite);
    }
    let (n_c, n_t) = raw.dim();
    let mut matrix = Array2::zeros((n_c, n_t));
    let mut channels = Vec::with_capacity(n_c);
    for c in 0..n_c {
        let row = raw.row(c).to_vec();
        let stats = channel_stats(&row);
        // An exactly constant row normalizes to zeros; without this the
        // floored std amplifies mean-accumulation rounding to ~1e-8.
        if stats.max > stats.min {
            for (j, v) in row.iter().enumerate() {
                matrix[[c, j]] = (v - stats.mean) / stats.std;
            }
        }
        channels.push(stats);
    }
    Ok(ConditionedInput {
        matrix,
        stats: NormStats { channels },
        phase,
        lot_id: lot_id.to_string(),
        wafer_index,
    })
}

/// A fitted conditioning pipeline: selection statistics are fixed at fit
/// time, per-wafer conditioning is pure and parallelizable afterwards.
#[derive(Debug, Clone)]
pub struct ConditioningPipeline {
    pub selection: ChannelSelection,
    pub config: ConditioningConfig,
}

impl ConditioningPipeline {
    /// Fits channel selection on the given (training) runs.
    pub fn fit(runs: &[&WaferRun], config: &ConditioningConfig) -> Result<Self, ConditionError> {
        let selection = select_channels(runs, &config.selection)?;
        Ok(Self {
            selection,
            config: config.clone(),
        })
    }

    /// Conditions one wafer with the fitted selection.
    pub fn condition(&self, run: &WaferRun) -> Result<ConditionedInput, ConditionError> {
        let phase = detect_active_phase(run, &self.config.phase)?;
        let raw = align_and_resample(run, &self.selection, phase, self.config.n_time.0)?;
        normalize_instance(&raw, phase, &run.lot_id, run.wafer_index)
    }
}

/// Machine-readable conditioning summary, emitted by the CLI.
#[derive(Debug, Serialize)]
pub struct ConditioningReport {
    pub config: ConditioningConfig,
    pub kept_param_indices: Vec<usize>,
    pub kept_param_names: Vec<String>,
    pub kept_wavelength_indices: Vec<usize>,
    pub kept_wavelengths_nm: Vec<f64>,
    pub wavelength_scores: Vec<f64>,
    pub per_wafer_phase: Vec<WaferPhase>,
    pub exclusions: Vec<WaferExclusion>,
}

#[derive(Debug, Serialize)]
pub struct WaferPhase {
    pub lot_id: String,
    pub wafer_index: usize,
    pub phase_start: usize,
    pub phase_end: usize,
}

#[derive(Debug, Serialize)]
pub struct WaferExclusion {
    pub lot_id: String,
    pub wafer_index: usize,
    pub reason: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ProfilePoint, SignalMatrix, SpatialProfile, SpectralMatrix};
    use crate::PROFILE_POINTS;

    fn profile() -> SpatialProfile {
        let pts = (0..PROFILE_POINTS)
            .map(|i| ProfilePoint {
                x_mm: i as f64,
                y_mm: 0.0,
                depth_um: 30.0,
            })
            .collect();
        SpatialProfile::new(pts).unwrap()
    }

    fn run_with(params: Array2<f64>, names: Vec<&str>, oes: Array2<f64>, wl: Vec<f64>) -> WaferRun {
        WaferRun {
            lot_id: "lot0".into(),
            wafer_index: 0,
            params: SignalMatrix {
                names: names.into_iter().map(String::from).collect(),
                values: params,
            },
            oes: SpectralMatrix {
                wavelengths_nm: wl,
                values: oes,
            },
            profile: profile(),
            sample_period_s: 1.0,
        }
    }

    #[test]
    fn constant_channel_is_dropped() {
        let t = 50;
        let params = Array2::from_shape_fn((t, 3), |(r, c)| match c {
            0 => (r as f64).sin(),
            1 => 7.0, // constant
            _ => r as f64,
        });
        let oes = Array2::from_elem((t, 2), 1.0);
        let run = run_with(params, vec!["a", "b", "c"], oes, vec![300.0, 400.0]);
        let kept = filter_low_variance_params(&[&run], 1e-4).unwrap();
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn zero_epsilon_keeps_all_nonconstant_channels() {
        let t = 30;
        let params = Array2::from_shape_fn((t, 4), |(r, c)| match c {
            3 => 2.5, // constant
            _ => ((r + c) as f64 * 0.1).cos() * (c as f64 + 0.001),
        });
        let oes = Array2::from_elem((t, 2), 1.0);
        let run = run_with(params, vec!["a", "b", "c", "d"], oes, vec![300.0, 400.0]);
        let kept = filter_low_variance_params(&[&run], 0.0).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn inconsistent_channel_names_are_rejected() {
        let t = 10;
        let a = run_with(
            Array2::zeros((t, 1)),
            vec!["a"],
            Array2::zeros((t, 1)),
            vec![300.0],
        );
        let b = run_with(
            Array2::zeros((t, 1)),
            vec!["b"],
            Array2::zeros((t, 1)),
            vec![300.0],
        );
        match filter_low_variance_params(&[&a, &b], 0.0) {
            Err(ConditionError::InconsistentChannels) => {}
            other => panic!("expected InconsistentChannels, got {other:?}"),
        }
    }

    /// Brute-force oracle: recompute both statistics per wafer, median, and
    /// min-max combination with scalar loops.
    fn oracle_scores(runs: &[&WaferRun]) -> Vec<f64> {
        let n_wl = runs[0].oes.wavelengths_nm.len();
        let mut s1 = vec![0.0; n_wl];
        let mut s2 = vec![0.0; n_wl];
        for w in 0..n_wl {
            let mut stds: Vec<f64> = Vec::new();
            let mut mads: Vec<f64> = Vec::new();
            for run in runs {
                let col: Vec<f64> = run.oes.values.column(w).to_vec();
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                stds.push(var.sqrt());
                let mut acc = 0.0;
                for t in 1..col.len() {
                    acc += (col[t] - col[t - 1]).abs();
                }
                mads.push(acc / (col.len() - 1) as f64);
            }
            stds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mads.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = |v: &[f64]| {
                if v.len() % 2 == 1 {
                    v[v.len() / 2]
                } else {
                    0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
                }
            };
            s1[w] = med(&stds);
            s2[w] = med(&mads);
        }
        let norm = |v: &mut Vec<f64>| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for x in v.iter_mut() {
                *x = if hi > lo { (*x - lo) / (hi - lo) } else { 0.0 };
            }
        };
        norm(&mut s1);
        norm(&mut s2);
        (0..n_wl).map(|w| 0.5 * (s1[w] + s2[w])).collect()
    }

    #[test]
    fn oes_scores_match_brute_force_oracle() {
        let t = 40;
        let wl = vec![250.0, 300.0, 350.0, 400.0, 450.0];
        let runs: Vec<WaferRun> = (0..3)
            .map(|k| {
                let oes = Array2::from_shape_fn((t, 5), |(r, c)| {
                    ((r as f64 * 0.3 + k as f64) * (c as f64 + 1.0)).sin() * (c as f64 + 0.5)
                        + k as f64
                });
                let params = Array2::from_shape_fn((t, 1), |(r, _)| r as f64);
                run_with(params, vec!["p"], oes, wl.clone())
            })
            .collect();
        let refs: Vec<&WaferRun> = runs.iter().collect();
        let got = score_oes_wavelengths(&refs).unwrap();
        let want = oracle_scores(&refs);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn identical_series_get_identical_scores() {
        let t = 30;
        let oes = Array2::from_shape_fn((t, 3), |(r, c)| {
            if c == 2 {
                (r as f64 * 0.7).sin() // distinct
            } else {
                (r as f64 * 0.2).cos() // columns 0 and 1 identical
            }
        });
        let params = Array2::from_shape_fn((t, 1), |(r, _)| r as f64);
        let run = run_with(params, vec!["p"], oes, vec![300.0, 310.0, 320.0]);
        let scores = score_oes_wavelengths(&[&run]).unwrap();
        assert_eq!(scores[0], scores[1]);
    }

    #[test]
    fn constant_wavelength_scores_zero() {
        let t = 30;
        let oes = Array2::from_shape_fn((t, 3), |(r, c)| {
            if c == 0 {
                5.0
            } else {
                (r as f64 * (c as f64)).sin()
            }
        });
        let params = Array2::from_shape_fn((t, 1), |(r, _)| r as f64);
        let run = run_with(params, vec!["p"], oes, vec![300.0, 310.0, 320.0]);
        let scores = score_oes_wavelengths(&[&run]).unwrap();
        assert_eq!(scores[0], 0.0);
    }

    #[test]
    fn nms_window_zero_is_plain_topk() {
        let scores = [0.1, 0.9, 0.5, 0.7];
        let wl = [400.0, 410.0, 420.0, 430.0];
        let got = select_topk_nms(&scores, &wl, 2, 0.0);
        assert_eq!(got, vec![1, 3]);
    }

    #[test]
    fn nms_suppresses_adjacent_band() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let wl = [400.0, 401.0, 500.0, 501.0];
        let got = select_topk_nms(&scores, &wl, 2, 5.0);
        assert_eq!(got, vec![0, 2]);
    }

    #[test]
    fn nms_returns_fewer_when_exhausted() {
        let scores = [0.9, 0.8, 0.7];
        let wl = [400.0, 401.0, 402.0];
        let got = select_topk_nms(&scores, &wl, 3, 10.0);
        assert_eq!(got, vec![0]);
    }

    /// Independent greedy trace oracle.
    fn nms_oracle(scores: &[f64], wl: &[f64], k: usize, window: f64) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..scores.len()).collect();
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < k && !remaining.is_empty() {
            let mut best = remaining[0];
            for &i in &remaining[1..] {
                if scores[i] > scores[best] || (scores[i] == scores[best] && wl[i] < wl[best]) {
                    best = i;
                }
            }
            picked.push(best);
            remaining.retain(|&i| i != best && (wl[i] - wl[best]).abs() >= window);
        }
        picked.sort_unstable();
        picked
    }

    #[test]
    fn nms_equals_greedy_oracle_on_random_instances() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..=12usize);
            let mut wl: Vec<f64> = (0..n).map(|_| rng.random_range(200.0..600.0)).collect();
            wl.sort_by(|a, b| a.partial_cmp(b).unwrap());
            wl.dedup();
            let scores: Vec<f64> = (0..wl.len()).map(|_| rng.random_range(0.0..1.0)).collect();
            let k = rng.random_range(1..=wl.len());
            let window = rng.random_range(0.0..120.0);
            let got = select_topk_nms(&scores, &wl, k, window);
            let want = nms_oracle(&scores, &wl, k, window);
            assert_eq!(got, want);
            for i in 0..got.len() {
                for j in i + 1..got.len() {
                    assert!((wl[got[i]] - wl[got[j]]).abs() >= window);
                }
            }
        }
    }

    fn pulse_run(t: usize, on: usize, off: usize) -> WaferRun {
        let params = Array2::from_shape_fn((t, 2), |(r, c)| {
            let v = if r >= on && r < off { 1.0 } else { 0.0 };
            v * (c as f64 + 1.0)
        });
        let oes = Array2::from_elem((t, 2), 1.0);
        run_with(params, vec!["gas_flow", "rf_power"], oes, vec![300.0, 400.0])
    }

    #[test]
    fn square_pulse_phase_is_recovered_exactly() {
        let run = pulse_run(1000, 100, 900);
        let phase = detect_active_phase(&run, &PhaseConfig::default()).unwrap();
        assert_eq!(phase, (100, 900));
    }

    #[test]
    fn all_zero_trigger_is_no_active_phase() {
        let t = 100;
        let params = Array2::zeros((t, 2));
        let oes = Array2::from_elem((t, 2), 1.0);
        let run = run_with(params, vec!["gas_flow", "rf_power"], oes, vec![300.0, 400.0]);
        match detect_active_phase(&run, &PhaseConfig::default()) {
            Err(ConditionError::NoActivePhase) => {}
            other => panic!("expected NoActivePhase, got {other:?}"),
        }
    }

    /// Oracle: scan all contiguous intervals valid under the same predicate
    /// (endpoints active, no internal gap > max_gap); longest wins, then
    /// earliest start.
    fn phase_oracle(joint: &[bool], max_gap: usize) -> Option<(usize, usize)> {
        let t = joint.len();
        let mut best: Option<(usize, usize)> = None;
        for s in 0..t {
            if !joint[s] {
                continue;
            }
            for e in (s + 1)..=t {
                if !joint[e - 1] {
                    continue;
                }
                let mut gap = 0usize;
                let mut ok = true;
                for &a in &joint[s..e] {
                    if a {
                        gap = 0;
                    } else {
                        gap += 1;
                        if gap > max_gap {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    let better = match best {
                        None => true,
                        Some((bs, be)) => (e - s) > (be - bs),
                    };
                    if better {
                        best = Some((s, e));
                    }
                }
            }
        }
        best
    }

    #[test]
    fn dropout_is_bridged_and_matches_interval_oracle() {
        let t = 200;
        let mut active = vec![false; t];
        for i in 30..170 {
            active[i] = true;
        }
        for i in 100..103 {
            active[i] = false; // 3-sample dropout
        }
        let params = Array2::from_shape_fn((t, 2), |(r, _)| if active[r] { 5.0 } else { 0.0 });
        let oes = Array2::from_elem((t, 2), 1.0);
        let run = run_with(params, vec!["gas_flow", "rf_power"], oes, vec![300.0, 400.0]);
        let got = detect_active_phase(&run, &PhaseConfig::default()).unwrap();
        assert_eq!(got, (30, 170));
        assert_eq!(Some(got), phase_oracle(&active, 5));
    }

    #[test]
    fn phase_detection_matches_oracle_on_random_patterns() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..100 {
            let t = rng.random_range(20..120);
            let joint: Vec<bool> = (0..t).map(|_| rng.random_range(0.0..1.0) < 0.6).collect();
            let params = Array2::from_shape_fn((t, 1), |(r, _)| if joint[r] { 3.0 } else { 0.0 });
            let oes = Array2::from_elem((t, 1), 1.0);
            let run = run_with(params, vec!["gas_flow"], oes, vec![300.0]);
            let cfg = PhaseConfig {
                trigger_channels: vec!["gas_flow".into()],
                ..PhaseConfig::default()
            };
            let got = detect_active_phase(&run, &cfg).ok();
            assert_eq!(got, phase_oracle(&joint, cfg.max_gap));
        }
    }

    #[test]
    fn phase_detection_is_translation_equivariant() {
        let base = pulse_run(400, 50, 300);
        let shifted = pulse_run(400, 90, 340);
        let a = detect_active_phase(&base, &PhaseConfig::default()).unwrap();
        let b = detect_active_phase(&shifted, &PhaseConfig::default()).unwrap();
        assert_eq!((a.0 + 40, a.1 + 40), b);
    }

    fn toy_selection(n_params: usize, n_oes: usize) -> ChannelSelection {
        ChannelSelection {
            kept_param_indices: (0..n_params).collect(),
            kept_wavelength_indices: (0..n_oes).collect(),
            scores: vec![1.0; n_oes],
            config: SelectionConfig::default(),
        }
    }

    #[test]
    fn resampling_at_phase_length_is_identity() {
        let t = 64;
        let params = Array2::from_shape_fn((t, 1), |(r, _)| ((r as f64) * 0.37).sin() + 2.0);
        let oes = Array2::from_elem((t, 1), 1.0);
        let run = run_with(params, vec!["p"], oes, vec![300.0]);
        let sel = toy_selection(1, 0);
        let got = align_and_resample(&run, &sel, (10, 40), 30).unwrap();
        for j in 0..30 {
            assert!((got[[0, j]] - run.params.values[[10 + j, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ramp_survives_any_resampling_exactly() {
        let t = 100;
        let params = Array2::from_shape_fn((t, 1), |(r, _)| 3.0 * r as f64 - 7.0);
        let oes = Array2::from_elem((t, 1), 1.0);
        let run = run_with(params, vec!["p"], oes, vec![300.0]);
        let sel = toy_selection(1, 0);
        for n_t in [2usize, 7, 33, 100, 257] {
            let got = align_and_resample(&run, &sel, (5, 95), n_t).unwrap();
            let x0 = 3.0 * 5.0 - 7.0;
            let x1 = 3.0 * 94.0 - 7.0;
            for j in 0..n_t {
                let want = x0 + (x1 - x0) * j as f64 / (n_t - 1) as f64;
                let rel = (got[[0, j]] - want).abs() / want.abs().max(1.0);
                assert!(rel < 1e-12, "n_t={n_t} j={j}");
            }
        }
    }

    /// Second, independent piecewise-linear interpolation implementation.
    fn interp_oracle(series: &[f64], n: usize) -> Vec<f64> {
        let m = series.len();
        (0..n)
            .map(|j| {
                let x = (m - 1) as f64 * j as f64 / (n - 1) as f64;
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(m - 1);
                let w = x - lo as f64;
                series[lo] + (series[hi] - series[lo]) * w
            })
            .collect()
    }

    #[test]
    fn sine_resampling_matches_independent_oracle() {
        let t = 500;
        let params = Array2::from_shape_fn((t, 1), |(r, _)| (r as f64 * 0.05).sin() * 4.0 + 10.0);
        let oes = Array2::from_elem((t, 1), 1.0);
        let run = run_with(params, vec!["p"], oes, vec![300.0]);
        let sel = toy_selection(1, 0);
        let n_t = 6000;
        let got = align_and_resample(&run, &sel, (0, t), n_t).unwrap();
        let slice: Vec<f64> = run.params.values.column(0).to_vec();
        let want = interp_oracle(&slice, n_t);
        for j in 0..n_t {
            assert!((got[[0, j]] - want[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn too_short_phase_is_rejected() {
        let run = pulse_run(50, 10, 40);
        let sel = toy_selection(1, 0);
        match align_and_resample(&run, &sel, (10, 11), 8) {
            Err(ConditionError::PhaseTooShort { .. }) => {}
            other => panic!("expected PhaseTooShort, got {other:?}"),
        }
    }

    #[test]
    fn constant_channel_normalizes_to_zeros_with_floored_std() {
        let raw = Array2::from_elem((1, 32), 4.2);
        let out = normalize_instance(&raw, (0, 32), "lot0", 0).unwrap();
        assert!(out.matrix.iter().all(|v| *v == 0.0));
        assert_eq!(out.stats.channels[0].std, STD_FLOOR);
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_std() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(31);
        let raw = Array2::from_shape_fn((5, 200), |_| rng.random_range(-3.0..9.0));
        let out = normalize_instance(&raw, (0, 200), "lot0", 0).unwrap();
        for c in 0..5 {
            let row: Vec<f64> = out.matrix.row(c).to_vec();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let std = std_of(&row);
            assert!(mean.abs() <= 1e-6);
            assert!((std - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn trend_sign_of_increasing_ramp_is_positive() {
        let raw = Array2::from_shape_fn((1, 50), |(_, j)| j as f64 * 0.5);
        let out = normalize_instance(&raw, (0, 50), "lot0", 0).unwrap();
        assert_eq!(out.stats.channels[0].trend_sign, 1.0);
    }

    #[test]
    fn selection_is_deterministic() {
        let t = 60;
        let runs: Vec<WaferRun> = (0..4)
            .map(|k| {
                let params = Array2::from_shape_fn((t, 3), |(r, c)| {
                    ((r + k) as f64 * (c + 1) as f64 * 0.1).sin()
                });
                let oes = Array2::from_shape_fn((t, 6), |(r, c)| {
                    ((r + k) as f64 * 0.2).cos() * (c as f64 + 0.3)
                });
                run_with(
                    params,
                    vec!["a", "b", "c"],
                    oes,
                    vec![300.0, 320.0, 340.0, 360.0, 380.0, 400.0],
                )
            })
            .collect();
        let refs: Vec<&WaferRun> = runs.iter().collect();
        let cfg = SelectionConfig::default();
        let a = select_channels(&refs, &cfg).unwrap();
        let b = select_channels(&refs, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
