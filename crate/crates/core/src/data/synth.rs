//! Seeded synthetic datasets standing in for the classification and anomaly
//! benchmarks at desk scale.

use super::{DataError, LabelKind, Labels, Layout, Manifest, Result, Split, TimeSeriesDataset};
use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreqClassMode {
    /// Class = carrier frequency; envelope shared by all classes.
    SpectralOnly,
    /// Class = envelope position (circular shift); frequency shared.
    TemporalOnly,
    /// First half of the classes coded by frequency, second half by envelope.
    Mixed,
}

impl FromStr for FreqClassMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral-only" | "spectral" => Ok(Self::SpectralOnly),
            "temporal-only" | "temporal" => Ok(Self::TemporalOnly),
            "mixed" => Ok(Self::Mixed),
            other => Err(DataError::BadMode(other.to_string())),
        }
    }
}

/// Carrier bin of the `c`-th frequency-coded class.
fn spectral_bin(c: usize) -> usize {
    3 + 4 * c
}

/// Carrier bin shared by the envelope-coded classes.
const ENVELOPE_BIN: usize = 5;

fn envelope(t: usize, len: usize) -> f64 {
    let phase = PI * t as f64 / len as f64;
    0.15 + 0.85 * phase.sin().powi(2)
}

fn synth_manifest(name: &str, kind: LabelKind) -> Manifest {
    Manifest {
        name: name.into(),
        d: 0,
        t: 0,
        layout: Layout::Long,
        label_kind: kind,
        label_column: None,
        files: vec![],
        sampling_rate: None,
    }
}

/// Labeled sinusoid classes.
///
/// Instance `j` of every class shares one random amplitude and per-variable
/// phase, so classes differ only by the property `mode` assigns them.
/// Envelope-coded classes are exact circular shifts of one another and
/// therefore have identical magnitude spectra when `noise_std` is zero.
/// Instances are interleaved by class; split tags are 60/20/20 by `j`.
pub fn synth_freq_classes(
    n_classes: usize,
    n_per_class: usize,
    d: usize,
    t: usize,
    mode: FreqClassMode,
    noise_std: f64,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if n_classes < 2 {
        return Err(DataError::InvalidParameter("n_classes must be at least 2".into()));
    }
    if t < 32 {
        return Err(DataError::InvalidParameter("T must be at least 32".into()));
    }
    if d == 0 || n_per_class == 0 {
        return Err(DataError::InvalidParameter("D and n_per_class must be positive".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(DataError::InvalidParameter("noise_std must be finite and >= 0".into()));
    }
    let n_spectral = match mode {
        FreqClassMode::SpectralOnly => n_classes,
        FreqClassMode::TemporalOnly => 0,
        FreqClassMode::Mixed => n_classes.div_ceil(2),
    };
    let n_envelope = n_classes - n_spectral;
    if n_spectral > 0 && spectral_bin(n_spectral - 1) >= t / 2 {
        return Err(DataError::BadMode(format!(
            "{n_spectral} frequency-coded classes do not fit below Nyquist for T={t}"
        )));
    }
    if n_envelope > t {
        return Err(DataError::BadMode(format!(
            "{n_envelope} envelope-coded classes need T >= {n_envelope}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_classes * n_per_class;
    let mut values = Array3::zeros((n, d, t));
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let tf = t as f64;
    for j in 0..n_per_class {
        let amplitude = rng.random_range(0.6..1.4);
        let phases: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for c in 0..n_classes {
            let row = j * n_classes + c;
            for (v, &phase) in phases.iter().enumerate() {
                for step in 0..t {
                    let x = if c < n_spectral {
                        let k = spectral_bin(c) as f64;
                        amplitude * (2.0 * PI * k * step as f64 / tf + phase).sin()
                    } else {
                        let shift = (c - n_spectral) * t / n_envelope;
                        let src = (step + t - shift) % t;
                        let k = ENVELOPE_BIN as f64;
                        amplitude
                            * envelope(src, t)
                            * (2.0 * PI * k * src as f64 / tf + phase).sin()
                    };
                    values[[row, v, step]] = x;
                }
            }
            labels.push(c);
            splits.push(Split::by_index(j));
        }
    }
    if noise_std > 0.0 {
        for x in values.iter_mut() {
            *x += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let name = match mode {
        FreqClassMode::SpectralOnly => "freq-spectral",
        FreqClassMode::TemporalOnly => "freq-temporal",
        FreqClassMode::Mixed => "freq-mixed",
    };
    TimeSeriesDataset::new(
        values,
        Labels::Class(labels),
        splits,
        synth_manifest(name, LabelKind::Class),
    )
}

/// Smooth multi-sinusoid series with additive spikes.
///
/// Each instance gets `round(spike_rate · T)` spikes at distinct timesteps,
/// each on one random variable with random sign and height
/// `spike_magnitude` times that variable's base standard deviation.
pub fn synth_anomaly_series(
    d: usize,
    t: usize,
    n_instances: usize,
    spike_rate: f64,
    spike_magnitude: f64,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if !(spike_rate > 0.0 && spike_rate < 0.2) {
        return Err(DataError::InvalidParameter("spike_rate must lie in (0, 0.2)".into()));
    }
    if d == 0 || t < 2 || n_instances == 0 {
        return Err(DataError::InvalidParameter(
            "need D >= 1, T >= 2 and at least one instance".into(),
        ));
    }
    if !(spike_magnitude >= 0.0 && spike_magnitude.is_finite()) {
        return Err(DataError::InvalidParameter("spike_magnitude must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array3::zeros((n_instances, d, t));
    let mut flags = Array2::from_elem((n_instances, t), false);
    let n_spikes = (spike_rate * t as f64).round() as usize;
    for i in 0..n_instances {
        let mut sd = vec![0.0; d];
        for (v, sd_v) in sd.iter_mut().enumerate() {
            let comps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.5..1.5),
                        rng.random_range(40.0..160.0),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            for step in 0..t {
                values[[i, v, step]] = comps
                    .iter()
                    .map(|&(a, period, phase)| a * (2.0 * PI * step as f64 / period + phase).sin())
                    .sum();
            }
            let lane: Vec<f64> = (0..t).map(|s| values[[i, v, s]]).collect();
            let mean = lane.iter().sum::<f64>() / t as f64;
            *sd_v = (lane.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
        }
        for step in sample(&mut rng, t, n_spikes).into_iter() {
            let v = rng.random_range(0..d);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            values[[i, v, step]] += sign * spike_magnitude * sd[v];
            flags[[i, step]] = true;
        }
    }
    let splits = (0..n_instances).map(Split::by_index).collect();
    TimeSeriesDataset::new(
        values,
        Labels::Anomaly(flags),
        splits,
        synth_manifest("spikes", LabelKind::Anomaly),
    )
}
