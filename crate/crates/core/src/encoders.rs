//! Temporal and spectral encoders.
//!
//! The temporal encoder is a stack of dilated causal residual blocks over the
//! raw series; the spectral encoder is a stack of centered residual blocks
//! over the per-variable FFT spectrum. Both end in adaptive max-pooling so the
//! feature shapes do not depend on the input length.

use crate::layers::{causal_offsets, conv, same_offsets};
use crate::model::{Init, ModelError, ParamSpec, ParamStore, Result};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// How the FFT of each variable is presented to the spectral encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralRepr {
    /// `log(1 + |X_k|)`.
    #[default]
    LogMagnitude,
    /// `|X_k|`.
    Magnitude,
    /// Real parts of all variables followed by imaginary parts.
    RealImag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalBlocks {
    pub count: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralBlocks {
    pub count: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channel width of both encoders.
    pub d: usize,
    /// Temporal positions after pooling.
    pub m: usize,
    /// Spectral positions after pooling.
    pub n: usize,
    pub temporal_blocks: TemporalBlocks,
    pub spectral_blocks: SpectralBlocks,
    pub spectral_repr: SpectralRepr,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            m: 16,
            n: 16,
            temporal_blocks: TemporalBlocks {
                count: 4,
                kernel: 3,
                dilations: vec![1, 2, 4, 8],
            },
            spectral_blocks: SpectralBlocks { count: 3, kernel: 3 },
            spectral_repr: SpectralRepr::LogMagnitude,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.m < 1 || self.n < 1 {
            return bad(format!("m and n must be >= 1 (m={}, n={})", self.m, self.n));
        }
        if self.d < 2 {
            return bad(format!("d must be >= 2 (d={})", self.d));
        }
        let tb = &self.temporal_blocks;
        if tb.kernel == 0 || self.spectral_blocks.kernel == 0 {
            return bad("kernel sizes must be >= 1".into());
        }
        if tb.dilations.len() != tb.count {
            return bad(format!(
                "temporal dilation schedule has {} entries for {} blocks",
                tb.dilations.len(),
                tb.count
            ));
        }
        if tb.dilations.iter().any(|d| !d.is_power_of_two())
            || tb.dilations.windows(2).any(|w| w[1] <= w[0])
        {
            return bad(format!(
                "dilations {:?} must be strictly increasing powers of two",
                tb.dilations
            ));
        }
        Ok(())
    }

    /// Number of spectral input channels for `vars` input variables.
    pub fn spectral_channels(&self, vars: usize) -> usize {
        match self.spectral_repr {
            SpectralRepr::RealImag => 2 * vars,
            _ => vars,
        }
    }

    /// Shortest series both encoders accept.
    pub fn min_length(&self) -> usize {
        // Spectrum length is T/2 + 1 and must cover n pooled positions.
        self.m.max(2 * self.n.saturating_sub(1)).max(2)
    }

    /// Parameter layout of both encoders for `vars` input variables.
    pub fn param_specs(&self, vars: usize) -> Vec<ParamSpec> {
        let d = self.d;
        let mut specs = Vec::new();
        let mut stack = |prefix: &str, in_ch: usize, count: usize, kernel: usize| {
            specs.push(ParamSpec::new(format!("{prefix}.input.w"), in_ch, d, Init::Scaled { fan_in: in_ch }));
            specs.push(ParamSpec::new(format!("{prefix}.input.b"), 1, d, Init::Zeros));
            for i in 0..count {
                specs.push(ParamSpec::new(
                    format!("{prefix}.block{i}.w"),
                    kernel * d,
                    d,
                    Init::Scaled { fan_in: kernel * d },
                ));
                specs.push(ParamSpec::new(format!("{prefix}.block{i}.b"), 1, d, Init::Zeros));
            }
        };
        stack("temporal", vars, self.temporal_blocks.count, self.temporal_blocks.kernel);
        stack(
            "spectral",
            self.spectral_channels(vars),
            self.spectral_blocks.count,
            self.spectral_blocks.kernel,
        );
        specs
    }
}

/// Temporal and spectral features of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    /// `[m × d]`
    pub f_t: Array2<f64>,
    /// `[n × d]`
    pub f_s: Array2<f64>,
}

/// Per-variable real FFT of a `[D × T]` series, as `[D' × (T/2 + 1)]`.
pub fn to_spectral(x: ArrayView2<'_, f64>, repr: SpectralRepr) -> Result<Array2<f64>> {
    let (vars, t) = x.dim();
    if t < 2 {
        return Err(ModelError::TooShort { needed: 2, got: t });
    }
    let bins = t / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(t);
    let rows = if repr == SpectralRepr::RealImag { 2 * vars } else { vars };
    let mut out = Array2::zeros((rows, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for v in 0..vars {
        for (b, &val) in buf.iter_mut().zip(x.row(v)) {
            *b = Complex::new(val, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let c = buf[k];
            match repr {
                SpectralRepr::LogMagnitude => out[[v, k]] = c.norm().ln_1p(),
                SpectralRepr::Magnitude => out[[v, k]] = c.norm(),
                SpectralRepr::RealImag => {
                    out[[v, k]] = c.re;
                    out[[vars + v, k]] = c.im;
                }
            }
        }
    }
    Ok(out)
}

/// Residual block stack on the tape: input projection, then
/// `h ← h + tanh(conv(h))` per block. Returns the pre-pooling features.
fn residual_stack(
    tape: &mut Tape<'_>,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    offsets: &[Vec<isize>],
) -> Result<Var> {
    let w = params.var(tape, &format!("{prefix}.input.w"))?;
    let b = params.var(tape, &format!("{prefix}.input.b"))?;
    check_rows(tape, w, tape.shape(x).1, prefix)?;
    let h = tape.matmul(x, w);
    let mut h = tape.add_bias(h, b);
    for (i, taps) in offsets.iter().enumerate() {
        let w = params.var(tape, &format!("{prefix}.block{i}.w"))?;
        let b = params.var(tape, &format!("{prefix}.block{i}.b"))?;
        let c = conv(tape, h, w, Some(b), taps);
        let a = tape.tanh(c);
        h = tape.add(h, a);
    }
    Ok(h)
}

fn check_rows(tape: &Tape<'_>, w: Var, channels: usize, prefix: &str) -> Result<()> {
    let rows = tape.shape(w).0;
    if rows != channels {
        return Err(ModelError::ShapeMismatch(format!(
            "{prefix} encoder expects {rows} input channels, got {channels}"
        )));
    }
    Ok(())
}

/// Temporal encoder on the tape. `x` is `[T × D]`. Returns `(pre_pool, F_t)`.
pub fn temporal_forward(
    tape: &mut Tape<'_>,
    params: &ParamStore,
    config: &EncoderConfig,
    x: Var,
) -> Result<(Var, Var)> {
    let t = tape.shape(x).0;
    if t < config.m.max(1) {
        return Err(ModelError::InputTooShort { needed: config.m, got: t });
    }
    let tb = &config.temporal_blocks;
    let offsets: Vec<Vec<isize>> = tb.dilations.iter().map(|&d| causal_offsets(tb.kernel, d)).collect();
    let h = residual_stack(tape, params, "temporal", x, &offsets)?;
    let pooled = tape.max_pool(h, config.m);
    Ok((h, pooled))
}

/// Spectral encoder on the tape. `s` is `[bins × D']`. Returns `(pre_pool, F_s)`.
pub fn spectral_forward(
    tape: &mut Tape<'_>,
    params: &ParamStore,
    config: &EncoderConfig,
    s: Var,
) -> Result<(Var, Var)> {
    let bins = tape.shape(s).0;
    if bins < config.n {
        return Err(ModelError::InputTooShort { needed: config.n, got: bins });
    }
    let sb = &config.spectral_blocks;
    let offsets = vec![same_offsets(sb.kernel, 1); sb.count];
    let h = residual_stack(tape, params, "spectral", s, &offsets)?;
    let pooled = tape.max_pool(h, config.n);
    Ok((h, pooled))
}

/// `F_t` for a `[D × T]` series.
pub fn temporal_encode(
    x: ArrayView2<'_, f64>,
    params: &ParamStore,
    config: &EncoderConfig,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new(params.values());
    let xv = tape.constant(x.t().to_owned());
    let (_, f_t) = temporal_forward(&mut tape, params, config, xv)?;
    Ok(tape.value(f_t).clone())
}

/// `F_s` for a `[D' × bins]` spectrum as produced by [`to_spectral`].
pub fn spectral_encode(
    spectrum: ArrayView2<'_, f64>,
    params: &ParamStore,
    config: &EncoderConfig,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new(params.values());
    let sv = tape.constant(spectrum.t().to_owned());
    let (_, f_s) = spectral_forward(&mut tape, params, config, sv)?;
    Ok(tape.value(f_s).clone())
}

/// Both feature maps of a `[D × T]` series.
pub fn encode(x: ArrayView2<'_, f64>, params: &ParamStore, config: &EncoderConfig) -> Result<FeatureMaps> {
    let spectrum = to_spectral(x, config.spectral_repr)?;
    Ok(FeatureMaps {
        f_t: temporal_encode(x, params, config)?,
        f_s: spectral_encode(spectrum.view(), params, config)?,
    })
}
