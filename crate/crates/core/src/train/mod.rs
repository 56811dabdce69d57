//! Contrastive training loop, checkpoints and gradient verification.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use gradcheck::{
    finite_difference, gradcheck, relative_error, GradCheckGroup, GradCheckReport, StructuralCheck,
};

use crate::augment::{make_batch, AugmentError, NegativePolicy, PolicyKind, ViewBatch};
use crate::data::{DataError, Split, TimeSeriesDataset};
use crate::encoders::EncoderConfig;
use crate::fusion::FusionConfig;
use crate::loss::{batch_loss, LossConfig, LossError};
use crate::model::{Model, ModelConfig, ModelError, ParamStore};
use crate::tensor::{Mat, Tape};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("non-finite gradient for {param} at step {step}")]
    NonFiniteGradient { step: u64, param: String },
    #[error("finite-difference perturbation {0} is not a positive finite number")]
    NonFinitePerturbation(f64),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `ceil(n_train / batch_size)` when absent.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub dropout_rate: f64,
    /// View-generating augmentation; dropout at `dropout_rate` when absent.
    pub augmentation: Option<PolicyKind>,
    pub negatives: NegativePolicy,
    /// Negatives per anchor; every available one when absent.
    pub n_negatives: Option<usize>,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            dropout_rate: 0.1,
            augmentation: None,
            negatives: NegativePolicy::OtherInstances,
            n_negatives: None,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be finite and >= 0", self.weight_decay));
        }
        if self.negatives == NegativePolicy::OtherInstances && self.batch_size < 2 {
            return bad("batch_size must be >= 2 when negatives come from other instances".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(AugmentError::RateOutOfRange(self.dropout_rate).into());
        }
        self.loss.validate()?;
        self.encoder.validate()?;
        self.fusion
            .validate(self.encoder.m, self.encoder.n, self.encoder.d)?;
        Ok(())
    }

    /// The augmentation used to generate views.
    pub fn view_policy(&self) -> PolicyKind {
        self.augmentation.clone().unwrap_or(PolicyKind::Dropout {
            rate: self.dropout_rate,
        })
    }

    /// Variables per encoded view for a dataset with `vars` variables.
    pub fn in_channels(&self, vars: usize) -> usize {
        match self.negatives {
            NegativePolicy::OtherInstances => vars,
            NegativePolicy::OtherVariables => 1,
        }
    }

    pub fn model_config(&self, vars: usize) -> ModelConfig {
        ModelConfig {
            in_channels: self.in_channels(vars),
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS) + weight_decay * *p;
                *p -= lr * update;
            });
        }
    }
}

/// Loss of one view batch and its gradient for every parameter array.
pub fn loss_and_grads(
    config: &ModelConfig,
    params: &ParamStore,
    batch: &ViewBatch,
    loss: &LossConfig,
) -> Result<(f64, Vec<Mat>)> {
    let mut tapes = Vec::with_capacity(batch.views.len());
    let mut flats = Vec::with_capacity(batch.views.len());
    for view in &batch.views {
        let mut tape = Tape::new(params.values());
        let vars = Model::forward_on(config, params, &mut tape, view.view(), None)?;
        flats.push(tape.value(vars.fusion.flat).row(0).to_owned());
        tapes.push((tape, vars.fusion.flat));
    }
    let views: Vec<_> = flats.iter().map(|f| f.view()).collect();
    let out = batch_loss(&views, &batch.tuples, loss)?;
    let mut total: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
    for ((tape, flat), g) in tapes.iter().zip(&out.grads) {
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let seed = g.clone().insert_axis(ndarray::Axis(0));
        let grads = tape.backward(*flat, seed);
        for (acc, grad) in total.iter_mut().zip(grads.params) {
            if let Some(grad) = grad {
                *acc += &grad;
            }
        }
    }
    Ok((out.loss, total))
}

/// Loss of one view batch only.
pub fn batch_loss_value(
    config: &ModelConfig,
    params: &ParamStore,
    batch: &ViewBatch,
    loss: &LossConfig,
) -> Result<f64> {
    let mut flats = Vec::with_capacity(batch.views.len());
    for view in &batch.views {
        let mut tape = Tape::new(params.values());
        let vars = Model::forward_on(config, params, &mut tape, view.view(), None)?;
        flats.push(tape.value(vars.fusion.flat).row(0).to_owned());
    }
    let views: Vec<_> = flats.iter().map(|f| f.view()).collect();
    Ok(batch_loss(&views, &batch.tuples, loss)?.loss)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws the view batch of global step `step`. The same `(config, step)`
/// always yields the same batch.
pub fn draw_batch(
    config: &TrainConfig,
    dataset: &TimeSeriesDataset,
    train_idx: &[usize],
    step: u64,
) -> Result<ViewBatch> {
    let mut rng = step_rng(config.seed, step);
    let b = config.batch_size.min(train_idx.len());
    let mut picked = sample(&mut rng, train_idx.len(), b).into_vec();
    picked.sort_unstable();
    let series: Vec<_> = picked.iter().map(|&p| dataset.instance(train_idx[p])).collect();
    let n_neg = config.n_negatives.unwrap_or(usize::MAX);
    Ok(make_batch(
        &series,
        &config.view_policy(),
        n_neg,
        config.negatives,
        rng.random(),
    )?)
}

/// Training state: model, optimizer moments and history.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl Trainer {
    /// Fresh model for a dataset with `vars` variables.
    pub fn new(config: TrainConfig, vars: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model_config(vars), config.seed)?;
        let adam = Adam::new(&model.params);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    /// Continues from a checkpoint. `config` may change the schedule
    /// (epochs, learning rate, ...) but not the architecture.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.encoder != checkpoint.config.encoder || config.fusion != checkpoint.config.fusion {
            return Err(CheckpointError::VersionMismatch(
                "architecture differs from the checkpoint".into(),
            )
            .into());
        }
        let model = checkpoint.model()?;
        Ok(Self {
            config,
            model,
            adam: checkpoint.adam,
            epoch: checkpoint.epoch,
            loss_history: checkpoint.loss_history,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    fn train_indices(dataset: &TimeSeriesDataset) -> Result<Vec<usize>> {
        let idx = dataset.indices_of(Split::Train);
        if idx.is_empty() {
            return Err(DataError::EmptyTrainSplit.into());
        }
        Ok(idx)
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| n_train.div_ceil(self.config.batch_size))
    }

    /// One optimizer step; returns its loss.
    pub fn step(&mut self, dataset: &TimeSeriesDataset, train_idx: &[usize]) -> Result<f64> {
        let step = self.adam.t;
        let batch = draw_batch(&self.config, dataset, train_idx, step)?;
        let (loss, grads) = loss_and_grads(&self.model.config, &self.model.params, &batch, &self.config.loss)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, value: loss });
        }
        for (name, g) in self.model.params.names().iter().zip(&grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    step,
                    param: name.clone(),
                });
            }
        }
        self.adam.step(
            self.model.params.values_mut(),
            &grads,
            self.config.learning_rate,
            self.config.weight_decay,
        );
        self.loss_history.push(loss);
        Ok(loss)
    }

    /// Runs one epoch and returns its per-step losses.
    pub fn run_epoch(&mut self, dataset: &TimeSeriesDataset) -> Result<Vec<f64>> {
        let idx = Self::train_indices(dataset)?;
        let steps = self.steps_per_epoch(idx.len());
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            losses.push(self.step(dataset, &idx)?);
        }
        self.epoch += 1;
        Ok(losses)
    }

    /// Runs `n` optimizer steps regardless of epoch boundaries.
    pub fn run_steps(&mut self, dataset: &TimeSeriesDataset, n: usize) -> Result<Vec<f64>> {
        let idx = Self::train_indices(dataset)?;
        (0..n).map(|_| self.step(dataset, &idx)).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            in_channels: self.model.config.in_channels,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
        }
    }
}

/// Trains for `config.epochs` epochs on the training split.
pub fn train(config: &TrainConfig, dataset: &TimeSeriesDataset) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config.clone(), dataset.n_vars())?;
    for _ in 0..config.epochs {
        trainer.run_epoch(dataset)?;
    }
    Ok(trainer.checkpoint())
}

/// Arithmetic mean, for loss-curve summaries. Zero for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_freq_classes, FreqClassMode};

    pub(crate) fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 1,
            steps_per_epoch: Some(3),
            seed: 3,
            encoder: EncoderConfig {
                d: 4,
                m: 4,
                n: 4,
                ..EncoderConfig::default()
            },
            fusion: FusionConfig {
                l: 2,
                ..FusionConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn dataset() -> TimeSeriesDataset {
        synth_freq_classes(2, 10, 2, 32, FreqClassMode::SpectralOnly, 0.1, 1).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_train_config()
        };
        let ds = dataset();
        let mut t = Trainer::new(cfg, 2).unwrap();
        let before = t.model.params.clone();
        t.run_steps(&ds, 4).unwrap();
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = dataset();
        let a = train(&tiny_train_config(), &ds).unwrap();
        let b = train(&tiny_train_config(), &ds).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_history.len(), 3);
    }

    #[test]
    fn weight_decay_is_applied() {
        let ds = dataset();
        let run = |wd: f64| {
            let mut t = Trainer::new(
                TrainConfig {
                    weight_decay: wd,
                    ..tiny_train_config()
                },
                2,
            )
            .unwrap();
            t.run_steps(&ds, 1).unwrap();
            t.model.params
        };
        assert_ne!(run(0.0), run(1e-4));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = dataset();
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_train_config()
        };
        let full = train(&cfg, &ds).unwrap();
        let mut first = Trainer::new(cfg.clone(), 2).unwrap();
        first.run_epoch(&ds).unwrap();
        let mut resumed = Trainer::resume(first.checkpoint(), cfg).unwrap();
        resumed.run_epoch(&ds).unwrap();
        assert_eq!(resumed.checkpoint(), full);
    }

    #[test]
    fn config_validation_and_serde() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig {
            dropout_rate: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let text = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), TrainConfig::default());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 0.1}"#).is_err());
    }

    #[test]
    fn univariate_views_with_other_variable_negatives() {
        let ds = synth_freq_classes(2, 10, 3, 32, FreqClassMode::SpectralOnly, 0.1, 1).unwrap();
        let cfg = TrainConfig {
            negatives: NegativePolicy::OtherVariables,
            ..tiny_train_config()
        };
        let mut t = Trainer::new(cfg, 3).unwrap();
        assert_eq!(t.model.config.in_channels, 1);
        let losses = t.run_steps(&ds, 2).unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
    }
}
