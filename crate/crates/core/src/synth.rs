//! Synthetic dataset generator: lots of sequentially drifting wafers with
//! structured spatial non-uniformity and in-situ signals that carry
//! recoverable information about the target profile.
//!
//! Each wafer draws latent factors (mean level plus center-edge, ring and
//! asymmetry coefficients). The depth profile is a linear combination of
//! near-zero-mean spatial basis terms over a fixed 89-site layout. Signals
//! are plateau pulses delimiting a planted active phase; the latent factors
//! modulate waveform shape (tilt and ripples at distinct frequencies), so
//! the information survives per-channel instance normalization. Everything
//! derives from per-wafer seeded streams, so generation is deterministic
//! and parallel-safe, and `manifest.json` records the planted ground truth
//! for oracle tests.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_wafer_run, DataError, ProfilePoint, SignalMatrix, SpatialProfile, SpectralMatrix,
    WaferRun,
};
use crate::PROFILE_POINTS;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_lots: usize,
    pub wafers_per_lot: usize,
    /// Raw process-parameter channel count, including planted dead ones.
    pub n_pp_raw: usize,
    /// OES wavelength count.
    pub n_wl: usize,
    /// Raw samples per run.
    pub t_raw: usize,
    /// Monotone mean-depth drift per wafer within a lot, micrometers.
    pub drift_per_wafer: f64,
    /// Magnitude of the spatial non-uniformity coefficients, micrometers.
    pub shape_scale: f64,
    /// Relative noise on signals; also scales profile measurement noise.
    pub noise_sigma: f64,
    /// Coupling between latent factors and sensors, 0 = uninformative.
    pub signal_strength: f64,
    pub seed: u64,
    /// Number of constant parameter channels planted at the end indices.
    pub flat_param_channels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_lots: 9,
            wafers_per_lot: 10,
            n_pp_raw: 10,
            n_wl: 40,
            t_raw: 400,
            drift_per_wafer: 0.35,
            shape_scale: 4.5,
            noise_sigma: 0.02,
            signal_strength: 1.0,
            seed: 0,
            flat_param_channels: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_lots == 0 || self.wafers_per_lot == 0 {
            return fail("n_lots and wafers_per_lot must be positive".into());
        }
        if self.n_pp_raw < self.flat_param_channels + 2 {
            return fail(format!(
                "n_pp_raw ({}) must leave at least two informative channels beyond \
                 flat_param_channels ({})",
                self.n_pp_raw, self.flat_param_channels
            ));
        }
        if self.n_wl < 2 {
            return fail("n_wl must be at least 2".into());
        }
        if self.t_raw < 50 {
            return fail("t_raw must be at least 50".into());
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return fail("signal_strength must lie in [0, 1]".into());
        }
        if self.noise_sigma < 0.0 || self.drift_per_wafer < 0.0 || self.shape_scale < 0.0 {
            return fail("noise_sigma, drift_per_wafer, shape_scale must be non-negative".into());
        }
        Ok(())
    }
}

/// Per-wafer latent factors behind profile and signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    /// Wafer mean depth, micrometers.
    pub mean_level: f64,
    /// Center-edge coefficient (parabolic basis).
    pub center_edge: f64,
    /// Ring-pattern coefficient.
    pub ring: f64,
    /// Asymmetry magnitude.
    pub asym_mag: f64,
    /// Asymmetry angle, radians.
    pub asym_angle: f64,
}

impl LatentFactors {
    /// Cartesian asymmetry components `(c cos phi, c sin phi)`.
    pub fn asym_uv(&self) -> (f64, f64) {
        (
            self.asym_mag * self.asym_angle.cos(),
            self.asym_mag * self.asym_angle.sin(),
        )
    }
}

/// Ground truth record for one generated wafer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaferManifest {
    pub wafer_index: usize,
    pub factors: LatentFactors,
    /// Planted active phase, half-open raw sample range.
    pub phase: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LotManifest {
    pub lot_id: String,
    pub wafers: Vec<WaferManifest>,
}

/// Planted ground truth for a generated dataset. Consumed only by tests
/// and diagnostics, never by the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub channel_names: Vec<String>,
    pub wavelengths_nm: Vec<f64>,
    pub flat_param_indices: Vec<usize>,
    pub lots: Vec<LotManifest>,
}

const BASE_MEAN_UM: f64 = 30.0;
const MEAN_SPREAD_UM: f64 = 5.0;
const WAFER_RADIUS_MM: f64 = 100.0;
const RING_FRACS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const RING_COUNTS: [usize; 5] = [1, 8, 16, 28, 36];
const RAMP_SAMPLES: usize = 6;
const SAMPLE_PERIOD_S: f64 = 0.5;
const BAND_SIZE: usize = 4;
const N_FACTORS: usize = 5;

/// The measurement layout: 89 sites on five concentric rings.
pub fn standard_layout() -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity(PROFILE_POINTS);
    for (frac, count) in RING_FRACS.iter().zip(RING_COUNTS) {
        let r = frac * WAFER_RADIUS_MM;
        for j in 0..count {
            let theta = 2.0 * PI * j as f64 / count as f64;
            points.push((r * theta.cos(), r * theta.sin()));
        }
    }
    debug_assert_eq!(points.len(), PROFILE_POINTS);
    points
}

/// Spatial basis values at a layout point with normalized radius `r` and
/// angle `theta`: parabolic center-edge term and ring term are demeaned
/// over the layout so every basis is near-zero-mean.
fn basis_raw(r: f64) -> (f64, f64) {
    (2.0 * r * r - 1.0, (4.0 * PI * r).cos())
}

fn layout_polar(layout: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let max_r = layout
        .iter()
        .map(|(x, y)| (x * x + y * y).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    layout
        .iter()
        .map(|(x, y)| ((x * x + y * y).sqrt() / max_r, y.atan2(*x)))
        .collect()
}

fn basis_means(polar: &[(f64, f64)]) -> (f64, f64) {
    let n = polar.len() as f64;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (r, _) in polar {
        let (b1, b2) = basis_raw(*r);
        m1 += b1;
        m2 += b2;
    }
    (m1 / n, m2 / n)
}

/// Noise-free depth values at every layout site for the given factors.
pub fn profile_values(factors: &LatentFactors, layout: &[(f64, f64)]) -> Vec<f64> {
    let polar = layout_polar(layout);
    let (m1, m2) = basis_means(&polar);
    let (u, v) = factors.asym_uv();
    polar
        .iter()
        .map(|(r, theta)| {
            let (b1, b2) = basis_raw(*r);
            factors.mean_level
                + factors.center_edge * (b1 - m1)
                + factors.ring * (b2 - m2)
                + u * r * theta.cos()
                + v * r * theta.sin()
        })
        .collect()
}

/// Generates a depth profile on the standard layout, with optional
/// Gaussian measurement noise of the given standard deviation.
pub fn generate_profile(
    factors: &LatentFactors,
    noise_um: f64,
    rng: &mut StdRng,
) -> SpatialProfile {
    let layout = standard_layout();
    let values = profile_values(factors, &layout);
    let points = layout
        .iter()
        .zip(values)
        .map(|((x, y), depth)| ProfilePoint {
            x_mm: *x,
            y_mm: *y,
            depth_um: depth + noise_um * gaussian(rng),
        })
        .collect();
    SpatialProfile::new(points).expect("layout has 89 finite points")
}

/// Box-Muller standard normal draw.
fn gaussian(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Standardized latent factors, the modulation amplitudes seen by sensors.
fn standardized(factors: &LatentFactors, config: &SynthConfig) -> [f64; N_FACTORS] {
    let scale = config.shape_scale.max(1e-12);
    let (u, v) = factors.asym_uv();
    [
        (factors.mean_level - BASE_MEAN_UM) / MEAN_SPREAD_UM,
        factors.center_edge / scale,
        factors.ring / scale,
        u / scale,
        v / scale,
    ]
}

/// Temporal modulation basis for factor `f` at in-phase position `tau`.
/// The tilt encodes the mean level; ripples at distinct frequencies encode
/// the shape coefficients. All survive instance normalization.
fn factor_waveform(f: usize, tau: f64) -> f64 {
    match f {
        0 => tau - 0.5,
        1 => (6.0 * PI * tau).sin(),
        2 => (10.0 * PI * tau).sin(),
        3 => (14.0 * PI * tau).sin(),
        _ => (18.0 * PI * tau).sin(),
    }
}

/// Plateau pulse with linear ramps inside the half-open phase window.
fn pulse(t: usize, phase: (usize, usize)) -> f64 {
    let (t0, t1) = phase;
    if t < t0 || t >= t1 {
        return 0.0;
    }
    let up = (t - t0 + 1) as f64 / RAMP_SAMPLES as f64;
    let down = (t1 - t) as f64 / RAMP_SAMPLES as f64;
    up.min(down).min(1.0)
}

/// Parameter channel names; the first entries are chamber-operation
/// channels the phase detector triggers on.
pub fn param_channel_names(n: usize) -> Vec<String> {
    let known = [
        "gas_flow",
        "rf_power",
        "pressure",
        "temperature",
        "he_flow",
        "bias_voltage",
    ];
    (0..n)
        .map(|i| {
            known
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("aux{i}"))
        })
        .collect()
}

fn param_amplitude(k: usize) -> f64 {
    const KNOWN: [f64; 6] = [42.0, 550.0, 0.85, 78.0, 12.5, 310.0];
    KNOWN.get(k).copied().unwrap_or(5.0 + 3.0 * k as f64)
}

/// The OES wavelength grid in nm, strictly increasing.
pub fn wavelength_grid(n_wl: usize) -> Vec<f64> {
    (0..n_wl)
        .map(|i| 200.0 + 400.0 * i as f64 / (n_wl - 1).max(1) as f64)
        .collect()
}

/// Indices of the planted constant parameter channels: the trailing ones.
pub fn flat_indices(config: &SynthConfig) -> Vec<usize> {
    (config.n_pp_raw - config.flat_param_channels..config.n_pp_raw).collect()
}

/// Generates the in-situ signal matrices for one wafer. `stream` seeds the
/// noise generator, so identical factors and stream give identical output.
pub fn generate_signals(
    factors: &LatentFactors,
    phase: (usize, usize),
    config: &SynthConfig,
    stream: u64,
) -> (SignalMatrix, SpectralMatrix) {
    let mut rng = StdRng::seed_from_u64(stream);
    let z = standardized(factors, config);
    let ss = config.signal_strength;
    let t_raw = config.t_raw;
    let (t0, t1) = phase;
    let span = (t1 - t0) as f64;
    let flats = flat_indices(config);

    let mut params = Array2::zeros((t_raw, config.n_pp_raw));
    for k in 0..config.n_pp_raw {
        if flats.contains(&k) {
            let level = 7.5 + k as f64;
            for t in 0..t_raw {
                params[[t, k]] = level;
            }
            continue;
        }
        let amp = param_amplitude(k);
        let f1 = k % N_FACTORS;
        let f2 = (k + 2) % N_FACTORS;
        for t in 0..t_raw {
            let w = pulse(t, phase);
            if w == 0.0 {
                continue;
            }
            let tau = (t - t0) as f64 / span;
            let modulation = ss * (0.35 * factor_waveform(f1, tau) * z[f1]
                + 0.15 * factor_waveform(f2, tau) * z[f2])
                + 0.05 * (4.0 * PI * tau).sin();
            params[[t, k]] =
                amp * w * (1.0 + modulation) + amp * w * config.noise_sigma * gaussian(&mut rng);
        }
    }

    // OES: adjacent wavelengths share a band signal, so neighbors are
    // strongly correlated and NMS has redundancy to suppress.
    let mut oes = Array2::zeros((t_raw, config.n_wl));
    for i in 0..config.n_wl {
        let band = i / BAND_SIZE;
        let base = 60.0 + 25.0 * (band % 5) as f64;
        let gain = 1.0 + 0.08 * (i % BAND_SIZE) as f64;
        let ripple_amp = 0.05 + 0.02 * (band % 3) as f64;
        let ripple_freq = (2 + band % 4) as f64;
        let f1 = band % N_FACTORS;
        let f2 = (band + 3) % N_FACTORS;
        for t in 0..t_raw {
            let w = pulse(t, phase);
            if w == 0.0 {
                continue;
            }
            let tau = (t - t0) as f64 / span;
            let modulation = ss * (0.30 * factor_waveform(f1, tau) * z[f1]
                + 0.12 * factor_waveform(f2, tau) * z[f2])
                + ripple_amp * (2.0 * PI * ripple_freq * tau).sin();
            oes[[t, i]] = base * gain * w * (1.0 + modulation)
                + base * w * config.noise_sigma * gaussian(&mut rng);
        }
    }

    (
        SignalMatrix {
            names: param_channel_names(config.n_pp_raw),
            values: params,
        },
        SpectralMatrix {
            wavelengths_nm: wavelength_grid(config.n_wl),
            values: oes,
        },
    )
}

/// Splitmix-style stream derivation so each (lot, wafer) pair owns an
/// independent deterministic stream.
fn stream_seed(seed: u64, lot: u64, wafer: u64) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(lot.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(wafer.wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lot_id(lot: usize) -> String {
    format!("lot{lot:02}")
}

/// Draws one wafer's latent factors. The drift component is exactly
/// `drift_per_wafer * wafer_index` on top of a per-lot base level.
fn draw_factors(
    config: &SynthConfig,
    lot_rng_vals: (f64, f64, f64),
    wafer_rng: &mut StdRng,
    wafer_index: usize,
) -> LatentFactors {
    let (lot_offset, a_lot, b_lot) = lot_rng_vals;
    let scale = config.shape_scale;
    let a = scale * (a_lot + 0.6 * wafer_rng.random_range(-1.0..1.0));
    let b = scale * (b_lot + 0.6 * wafer_rng.random_range(-1.0..1.0));
    let u = scale * 0.7 * wafer_rng.random_range(-1.0..1.0);
    let v = scale * 0.7 * wafer_rng.random_range(-1.0..1.0);
    LatentFactors {
        mean_level: BASE_MEAN_UM + lot_offset + config.drift_per_wafer * wafer_index as f64,
        center_edge: a,
        ring: b,
        asym_mag: (u * u + v * v).sqrt(),
        asym_angle: v.atan2(u),
    }
}

/// Generates all wafer runs in memory along with the ground-truth manifest.
pub fn generate_runs(config: &SynthConfig) -> Result<(Vec<WaferRun>, Manifest), SynthError> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.n_lots * config.wafers_per_lot);
    let mut lots = Vec::with_capacity(config.n_lots);

    for lot in 0..config.n_lots {
        let mut lot_rng = StdRng::seed_from_u64(stream_seed(config.seed, lot as u64, u64::MAX));
        let lot_offset = lot_rng.random_range(-2.0..2.0);
        let a_lot = lot_rng.random_range(-0.5..0.5);
        let b_lot = lot_rng.random_range(-0.5..0.5);
        let mut wafers = Vec::with_capacity(config.wafers_per_lot);

        for wafer in 0..config.wafers_per_lot {
            let stream = stream_seed(config.seed, lot as u64, wafer as u64);
            let mut wafer_rng = StdRng::seed_from_u64(stream);
            let factors = draw_factors(config, (lot_offset, a_lot, b_lot), &mut wafer_rng, wafer);

            let jitter = wafer_rng.random_range(-8i64..=8);
            let t0 = ((0.12 * config.t_raw as f64) as i64 + jitter).max(0) as usize;
            let t1 = ((0.88 * config.t_raw as f64) as i64 + jitter) as usize;
            let phase = (t0, t1.min(config.t_raw));

            let (params, oes) =
                generate_signals(&factors, phase, config, stream.wrapping_add(1));
            let profile = generate_profile(
                &factors,
                config.noise_sigma * config.shape_scale,
                &mut wafer_rng,
            );

            runs.push(WaferRun {
                lot_id: lot_id(lot),
                wafer_index: wafer,
                params,
                oes,
                profile,
                sample_period_s: SAMPLE_PERIOD_S,
            });
            wafers.push(WaferManifest {
                wafer_index: wafer,
                factors,
                phase,
            });
        }
        lots.push(LotManifest {
            lot_id: lot_id(lot),
            wafers,
        });
    }

    Ok((
        runs,
        Manifest {
            config: config.clone(),
            channel_names: param_channel_names(config.n_pp_raw),
            wavelengths_nm: wavelength_grid(config.n_wl),
            flat_param_indices: flat_indices(config),
            lots,
        },
    ))
}

/// Generates and writes a dataset in the wafer directory format, plus
/// `manifest.json` with the planted ground truth.
pub fn generate_dataset(config: &SynthConfig, out_root: &Path) -> Result<Manifest, SynthError> {
    let (runs, manifest) = generate_runs(config)?;
    for run in &runs {
        let dir = out_root.join(&run.lot_id).join(run.wafer_index.to_string());
        write_wafer_run(&dir, run)?;
    }
    std::fs::create_dir_all(out_root)?;
    std::fs::write(
        out_root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}
