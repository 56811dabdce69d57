//! Classic time-series augmentations used as baselines against dropout.
//! Every policy maps a `[D × T]` series to a `[D × T]` series; time-axis
//! policies apply one warp to all variables so they stay aligned.

use super::{dropout_augment, AugmentError, Result};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

fn default_knots() -> usize {
    4
}

fn default_warp_scales() -> [f64; 2] {
    [0.5, 2.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    Dropout {
        rate: f64,
    },
    Jitter {
        sigma: f64,
    },
    Scaling {
        sigma: f64,
    },
    Rotation,
    MagnitudeWarp {
        sigma: f64,
        #[serde(default = "default_knots")]
        knots: usize,
    },
    Permutation {
        segments: usize,
    },
    Slicing {
        ratio: f64,
    },
    TimeWarp {
        sigma: f64,
        #[serde(default = "default_knots")]
        knots: usize,
    },
    WindowWarp {
        ratio: f64,
        #[serde(default = "default_warp_scales")]
        scales: [f64; 2],
    },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Dropout { .. } => "dropout",
            PolicyKind::Jitter { .. } => "jitter",
            PolicyKind::Scaling { .. } => "scaling",
            PolicyKind::Rotation => "rotation",
            PolicyKind::MagnitudeWarp { .. } => "magnitude_warp",
            PolicyKind::Permutation { .. } => "permutation",
            PolicyKind::Slicing { .. } => "slicing",
            PolicyKind::TimeWarp { .. } => "time_warp",
            PolicyKind::WindowWarp { .. } => "window_warp",
        }
    }

    /// Dropout at `rate` plus the eight baselines at common survey settings.
    pub fn benchmark_set(rate: f64) -> Vec<PolicyKind> {
        vec![
            PolicyKind::Dropout { rate },
            PolicyKind::Jitter { sigma: 0.03 },
            PolicyKind::Scaling { sigma: 0.1 },
            PolicyKind::Rotation,
            PolicyKind::MagnitudeWarp { sigma: 0.2, knots: 4 },
            PolicyKind::Permutation { segments: 5 },
            PolicyKind::Slicing { ratio: 0.9 },
            PolicyKind::TimeWarp { sigma: 0.2, knots: 4 },
            PolicyKind::WindowWarp {
                ratio: 0.1,
                scales: [0.5, 2.0],
            },
        ]
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AugmentError::BadPolicyParams(msg));
        let sigma_ok = |s: f64| s.is_finite() && s >= 0.0;
        match *self {
            PolicyKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(AugmentError::RateOutOfRange(rate))
            }
            PolicyKind::Jitter { sigma } | PolicyKind::Scaling { sigma } if !sigma_ok(sigma) => {
                bad(format!("{}: sigma {sigma} must be finite and >= 0", self.name()))
            }
            PolicyKind::MagnitudeWarp { sigma, knots } | PolicyKind::TimeWarp { sigma, knots }
                if !sigma_ok(sigma) || knots == 0 =>
            {
                bad(format!(
                    "{}: need sigma >= 0 and at least one knot (sigma {sigma}, knots {knots})",
                    self.name()
                ))
            }
            PolicyKind::Permutation { segments: 0 } => bad("permutation: zero segments".into()),
            PolicyKind::Slicing { ratio } if !(ratio > 0.0 && ratio <= 1.0) => {
                bad(format!("slicing: ratio {ratio} outside (0, 1]"))
            }
            PolicyKind::WindowWarp { ratio, scales }
                if !(ratio > 0.0 && ratio <= 1.0) || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) =>
            {
                bad(format!("window_warp: ratio {ratio} or scales {scales:?} invalid"))
            }
            _ => Ok(()),
        }
    }
}

/// A validated policy together with the seed of its random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    kind: PolicyKind,
    seed: u64,
}

impl AugmentPolicy {
    pub fn new(kind: PolicyKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, seed })
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Linear interpolation of `x` at fractional index `pos`, clamped to the ends.
fn interp(x: &[f64], pos: f64) -> f64 {
    let last = x.len() - 1;
    if pos <= 0.0 {
        return x[0];
    }
    if pos >= last as f64 {
        return x[last];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    x[i] + (x[i + 1] - x[i]) * frac
}

/// Evaluates `x` at `t` evenly spaced points spanning its full extent.
fn resample(x: &[f64], t: usize) -> Vec<f64> {
    if t == 1 {
        return vec![x[0]];
    }
    let step = (x.len() - 1) as f64 / (t - 1) as f64;
    (0..t).map(|i| interp(x, i as f64 * step)).collect()
}

/// Natural cubic spline through `(xs[k], ys[k])`, evaluated at `0..t`.
fn natural_spline(xs: &[f64], ys: &[f64], t: usize) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives from the tridiagonal system (Thomas algorithm).
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
        }
        for i in 1..k {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
        }
    }
    (0..t)
        .map(|p| {
            let x = p as f64;
            let seg = xs.windows(2).position(|w| x <= w[1]).unwrap_or(n - 2);
            let (x0, x1, hs) = (xs[seg], xs[seg + 1], h[seg]);
            let (a, b) = ((x1 - x) / hs, (x - x0) / hs);
            a * ys[seg]
                + b * ys[seg + 1]
                + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * hs * hs / 6.0
        })
        .collect()
}

/// Smooth random curve around 1: `knots` interior knots plus both ends, knot
/// values drawn from N(1, sigma²).
fn smooth_curve(rng: &mut ChaCha8Rng, t: usize, knots: usize, sigma: f64) -> Vec<f64> {
    let count = knots + 2;
    let span = (t.max(2) - 1) as f64;
    let xs: Vec<f64> = (0..count).map(|k| span * k as f64 / (count - 1) as f64).collect();
    let ys: Vec<f64> = (0..count).map(|_| 1.0 + sigma * gaussian(rng)).collect();
    natural_spline(&xs, &ys, t)
}

fn map_rows(x: ArrayView2<'_, f64>, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Array2<f64> {
    let (d, t) = x.dim();
    let mut out = Array2::zeros((d, t));
    for v in 0..d {
        let row = x.row(v).to_vec();
        let mapped = f(v, &row);
        debug_assert_eq!(mapped.len(), t);
        out.row_mut(v).assign(&ndarray::ArrayView1::from(&mapped));
    }
    out
}

/// Applies one augmentation. Output shape always equals input shape.
pub fn apply_policy(x: ArrayView2<'_, f64>, policy: &AugmentPolicy) -> Result<Array2<f64>> {
    let (_, t) = x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    match *policy.kind() {
        PolicyKind::Dropout { rate } => dropout_augment(x, rate, policy.seed),
        PolicyKind::Jitter { sigma } => Ok(x.mapv(|v| v + sigma * gaussian(&mut rng))),
        PolicyKind::Scaling { sigma } => {
            let factor = 1.0 + sigma * gaussian(&mut rng);
            Ok(x.mapv(|v| v * factor))
        }
        PolicyKind::Rotation => Ok(map_rows(x, |_, row| {
            let sign = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            row.iter().map(|v| v * sign).collect()
        })),
        PolicyKind::MagnitudeWarp { sigma, knots } => Ok(map_rows(x, |_, row| {
            let curve = smooth_curve(&mut rng, t, knots, sigma);
            row.iter().zip(&curve).map(|(v, c)| v * c).collect()
        })),
        PolicyKind::Permutation { segments } => {
            if segments > t {
                return Err(AugmentError::BadPolicyParams(format!(
                    "permutation: {segments} segments exceed length {t}"
                )));
            }
            let bounds: Vec<usize> = (0..=segments).map(|k| k * t / segments).collect();
            let mut order: Vec<usize> = (0..segments).collect();
            order.shuffle(&mut rng);
            Ok(map_rows(x, |_, row| {
                order
                    .iter()
                    .flat_map(|&k| row[bounds[k]..bounds[k + 1]].iter().copied())
                    .collect()
            }))
        }
        PolicyKind::Slicing { ratio } => {
            let len = ((ratio * t as f64).round() as usize).clamp(2.min(t), t);
            let start = rng.random_range(0..=t - len);
            Ok(map_rows(x, |_, row| resample(&row[start..start + len], t)))
        }
        PolicyKind::TimeWarp { sigma, knots } => {
            let speed = smooth_curve(&mut rng, t, knots, sigma);
            let mut warped = Vec::with_capacity(t);
            let mut acc = 0.0;
            for (i, s) in speed.iter().enumerate() {
                if i > 0 {
                    acc += s.max(0.05);
                }
                warped.push(acc);
            }
            let scale = if acc > 0.0 { (t - 1) as f64 / acc } else { 0.0 };
            Ok(map_rows(x, |_, row| {
                warped.iter().map(|&w| interp(row, w * scale)).collect()
            }))
        }
        PolicyKind::WindowWarp { ratio, scales } => {
            let len = ((ratio * t as f64).round() as usize).clamp(2.min(t), t);
            let start = rng.random_range(0..=t - len);
            let scale = scales[rng.random_range(0..2)];
            let warped_len = ((len as f64 * scale).round() as usize).max(2);
            Ok(map_rows(x, |_, row| {
                let mut joined = row[..start].to_vec();
                joined.extend(resample(&row[start..start + len], warped_len));
                joined.extend_from_slice(&row[start + len..]);
                resample(&joined, t)
            }))
        }
    }
}
