//! The full encoder-plus-fusion network and its parameters.

mod params;

pub use params::{Init, ParamSpec, ParamStore};

use crate::encoders::{spectral_forward, temporal_forward, to_spectral, EncoderConfig};
use crate::fusion::{fusion_forward, FusionConfig, FusionStep, FusionVars};
use crate::tensor::{Tape, Var};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("series too short: need at least {needed} timesteps, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("input too short for the encoder: need at least {needed} positions, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("joint representation has zero norm")]
    ZeroNorm,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture of one model: input width plus encoder and fusion settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Variables per encoded view.
    pub in_channels: usize,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(ModelError::InvalidConfig("in_channels must be >= 1".into()));
        }
        self.encoder.validate()?;
        self.fusion
            .validate(self.encoder.m, self.encoder.n, self.encoder.d)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let e = &self.encoder;
        let mut specs = e.param_specs(self.in_channels);
        specs.extend(self.fusion.param_specs(e.m, e.n, e.d));
        specs
    }

    /// Length of the flat representation, `l · d`.
    pub fn rep_dim(&self) -> usize {
        self.fusion.l * self.encoder.d
    }
}

/// Tape handles of every intermediate of one view's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ViewVars {
    pub f_t0: Var,
    pub f_s0: Var,
    pub fusion: FusionVars,
}

/// Plain arrays of one view's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatures {
    pub f_t0: Array2<f64>,
    pub f_s0: Array2<f64>,
    /// S2T output of the last loop.
    pub f_t: Array2<f64>,
    /// T2S output of the last loop.
    pub f_s: Array2<f64>,
    pub joint: Array2<f64>,
    pub flat: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_specs(&config.param_specs(), seed);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against the
    /// configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "configuration has {} parameter arrays, store has {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let value = params
                .get(&spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if value.dim() != (spec.rows, spec.cols) {
                return Err(ModelError::ShapeMismatch(format!(
                    "{}: stored {:?}, configuration expects {:?}",
                    spec.name,
                    value.dim(),
                    (spec.rows, spec.cols)
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Records the forward pass of one `[D × T]` view on `tape`, which must be
    /// built over `params` (this model's parameters or a perturbed copy).
    pub fn forward_on(
        config: &ModelConfig,
        params: &ParamStore,
        tape: &mut Tape<'_>,
        x: ArrayView2<'_, f64>,
        trace: Option<&mut Vec<FusionStep>>,
    ) -> Result<ViewVars> {
        if x.nrows() != config.in_channels {
            return Err(ModelError::ShapeMismatch(format!(
                "model expects {} variables per view, got {}",
                config.in_channels,
                x.nrows()
            )));
        }
        let spectrum = to_spectral(x, config.encoder.spectral_repr)?;
        let xv = tape.constant(x.t().to_owned());
        let sv = tape.constant(spectrum.t().to_owned());
        let (_, f_t0) = temporal_forward(tape, params, &config.encoder, xv)?;
        let (_, f_s0) = spectral_forward(tape, params, &config.encoder, sv)?;
        let fusion = fusion_forward(tape, params, &config.fusion, f_t0, f_s0, trace)?;
        Ok(ViewVars { f_t0, f_s0, fusion })
    }

    /// Inference forward pass of one view.
    pub fn features(&self, x: ArrayView2<'_, f64>) -> Result<ViewFeatures> {
        let mut tape = Tape::new(self.params.values());
        let v = Self::forward_on(&self.config, &self.params, &mut tape, x, None)?;
        Ok(ViewFeatures {
            f_t0: tape.value(v.f_t0).clone(),
            f_s0: tape.value(v.f_s0).clone(),
            f_t: tape.value(v.fusion.f_t).clone(),
            f_s: tape.value(v.fusion.f_s).clone(),
            joint: tape.value(v.fusion.joint).clone(),
            flat: tape.value(v.fusion.flat).row(0).to_owned(),
        })
    }

    /// Unit-norm flat representation of one view.
    pub fn represent(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.features(x)?.flat)
    }
}
