//! Downstream heads on frozen representations and representation diagnostics.

mod anomaly;
mod diagnostics;
mod probe;
mod ridge;

pub use anomaly::{
    anomaly_eval, evaluate_scores, random_baseline_f1, reconstruction_scores, threshold_sweep, AnomalyMetrics,
    DecoderConfig, ThresholdPoint, ThresholdPolicy,
};
pub use diagnostics::{
    alignment_metric, false_prediction_overlap, overlap_from_predictions, positive_pair_alignment,
    uniformity_metric, AlignmentSummary, OverlapReport, HISTOGRAM_BINS, HISTOGRAM_WIDTH,
};
pub use probe::{
    average_precision, fit_probe, linear_probe_classify, macro_auprc, probe_on_features, ClassifyMetrics, Probe,
    ProbeOutcome, Standardizer,
};
pub use ridge::{forecast_dataset, forecast_eval, ridge_fit, ForecastData, ForecastMetrics, HorizonMetrics, RidgeModel};

use crate::augment::AugmentError;
use crate::data::{Labels, Split, TimeSeriesDataset};
use crate::model::{Model, ModelError, ViewFeatures};
use crate::train::TrainError;
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the {split} split contains a single class")]
    SingleClassSplit { split: &'static str },
    #[error("the {split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("dataset has no {0} labels")]
    MissingLabels(&'static str),
    #[error("horizon {horizon} with input length {input} exceeds series length {t}")]
    HorizonExceedsData { horizon: usize, input: usize, t: usize },
    #[error("the test split has no anomalies, so recall is undefined")]
    NoAnomaliesInTest,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("singular system in {0}")]
    Singular(&'static str),
    #[error("invalid evaluation setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Flat representations of every instance with their labels and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    /// `[N × l·d]`, unit-norm rows.
    pub reps: Array2<f64>,
    pub labels: Labels,
    pub splits: Vec<Split>,
}

impl RepresentationSet {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Report of one downstream task, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    #[serde(flatten)]
    pub metrics: TaskMetrics,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Settings that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskMetrics {
    Classify(ClassifyMetrics),
    Forecast(ForecastMetrics),
    Anomaly(AnomalyMetrics),
}

/// Features of one instance. Models trained on single-variable views encode
/// each variable separately; their features are averaged and the flat
/// representation renormalized.
pub fn series_features(model: &Model, x: ArrayView2<'_, f64>) -> Result<ViewFeatures> {
    let c = model.config.in_channels;
    if x.nrows() == c {
        return Ok(model.features(x)?);
    }
    if c != 1 {
        return Err(ModelError::ShapeMismatch(format!(
            "model expects {c} variables, series has {}",
            x.nrows()
        ))
        .into());
    }
    let per: Vec<ViewFeatures> = x
        .rows()
        .into_iter()
        .map(|row| model.features(row.insert_axis(ndarray::Axis(0))))
        .collect::<std::result::Result<_, _>>()?;
    let k = per.len() as f64;
    let avg = |f: &dyn Fn(&ViewFeatures) -> &Array2<f64>| {
        per.iter().skip(1).fold(f(&per[0]).clone(), |acc, p| acc + f(p)) / k
    };
    let mut flat: Array1<f64> = per.iter().skip(1).fold(per[0].flat.clone(), |acc, p| acc + &p.flat);
    let norm = flat.dot(&flat).sqrt();
    if norm == 0.0 {
        return Err(ModelError::ZeroNorm.into());
    }
    flat /= norm;
    Ok(ViewFeatures {
        f_t0: avg(&|p| &p.f_t0),
        f_s0: avg(&|p| &p.f_s0),
        f_t: avg(&|p| &p.f_t),
        f_s: avg(&|p| &p.f_s),
        joint: avg(&|p| &p.joint),
        flat,
    })
}

/// Which intermediate of the network a feature set is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Unit-norm joint representation.
    Fused,
    /// Temporal encoder output before fusion.
    Temporal,
    /// Spectral encoder output before fusion.
    Spectral,
    /// Refined temporal feature from the last S2T.
    S2T,
    /// Refined spectral feature from the last T2S.
    T2S,
}

/// Every feature kind of every instance, each flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub fused: Array2<f64>,
    pub temporal: Array2<f64>,
    pub spectral: Array2<f64>,
    pub s2t: Array2<f64>,
    pub t2s: Array2<f64>,
    pub labels: Labels,
    pub splits: Vec<Split>,
}

impl FeatureSet {
    pub fn get(&self, kind: FeatureKind) -> &Array2<f64> {
        match kind {
            FeatureKind::Fused => &self.fused,
            FeatureKind::Temporal => &self.temporal,
            FeatureKind::Spectral => &self.spectral,
            FeatureKind::S2T => &self.s2t,
            FeatureKind::T2S => &self.t2s,
        }
    }

    pub fn representation_set(&self) -> RepresentationSet {
        RepresentationSet {
            reps: self.fused.clone(),
            labels: self.labels.clone(),
            splits: self.splits.clone(),
        }
    }
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).expect("equal row lengths")
}

/// Deterministic inference pass over every instance (no augmentation).
pub fn extract_features(model: &Model, dataset: &TimeSeriesDataset) -> Result<FeatureSet> {
    let mut cols: [Vec<Vec<f64>>; 5] = Default::default();
    for i in 0..dataset.len() {
        let f = series_features(model, dataset.instance(i))?;
        for (slot, arr) in cols.iter_mut().zip([
            f.flat.to_vec(),
            f.f_t0.iter().copied().collect(),
            f.f_s0.iter().copied().collect(),
            f.f_t.iter().copied().collect(),
            f.f_s.iter().copied().collect(),
        ]) {
            slot.push(arr);
        }
    }
    let [fused, temporal, spectral, s2t, t2s] = cols.map(|c| stack(&c));
    Ok(FeatureSet {
        fused,
        temporal,
        spectral,
        s2t,
        t2s,
        labels: dataset.labels.clone(),
        splits: dataset.splits.clone(),
    })
}

/// Unit-norm representations of every instance.
pub fn extract_representations(model: &Model, dataset: &TimeSeriesDataset) -> Result<RepresentationSet> {
    let rows: Vec<Vec<f64>> = (0..dataset.len())
        .map(|i| series_features(model, dataset.instance(i)).map(|f| f.flat.to_vec()))
        .collect::<Result<_>>()?;
    Ok(RepresentationSet {
        reps: stack(&rows),
        labels: dataset.labels.clone(),
        splits: dataset.splits.clone(),
    })
}
