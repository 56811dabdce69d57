//! Dataset types, ingestion, normalization, windowing and synthetic generators.

mod csv_io;
mod synth;

pub use csv_io::{load_csv, load_manifest, load_from_manifest, write_csv};
pub use synth::{synth_anomaly_series, synth_freq_classes, FreqClassMode};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file}: instance {instance} has {found} timesteps, expected {expected}")]
    RaggedLength {
        file: String,
        instance: String,
        expected: usize,
        found: usize,
    },
    #[error("{file}: row {row}, column `{column}`: `{value}` is not numeric")]
    NonNumericCell {
        file: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{file}: row {row}, column `{column}`: non-finite value")]
    NaNValue {
        file: String,
        row: usize,
        column: String,
    },
    #[error("{file}: instance {instance} has inconsistent class labels")]
    InconsistentLabel { file: String, instance: String },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("window length {length} exceeds series length {t}")]
    WindowTooLong { length: usize, t: usize },
    #[error("bad generator mode: {0}")]
    BadMode(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: bad manifest: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Class,
    Anomaly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One CSV per instance, one row per timestep.
    PerInstance,
    /// A single CSV with an `instance` id column.
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    /// Deterministic 60/20/20 assignment used by the synthetic generators.
    pub(crate) fn by_index(i: usize) -> Self {
        match i % 5 {
            0..=2 => Split::Train,
            3 => Split::Val,
            _ => Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub layout: Layout,
    pub label_kind: LabelKind,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub files: Vec<String>,
    /// Informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    None,
    /// One class id per instance.
    Class(Vec<usize>),
    /// Per-timestep anomaly flags, `[instances × T]`.
    Anomaly(Array2<bool>),
}

impl Labels {
    pub fn kind(&self) -> LabelKind {
        match self {
            Labels::None => LabelKind::None,
            Labels::Class(_) => LabelKind::Class,
            Labels::Anomaly(_) => LabelKind::Anomaly,
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Labels::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn anomalies(&self) -> Option<&Array2<bool>> {
        match self {
            Labels::Anomaly(a) => Some(a),
            _ => None,
        }
    }
}

/// Labeled or unlabeled multivariate series sharing one `[D × T]` shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    /// `[instances × D × T]`
    pub values: Array3<f64>,
    pub labels: Labels,
    pub splits: Vec<Split>,
    pub manifest: Manifest,
}

impl TimeSeriesDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        values: Array3<f64>,
        labels: Labels,
        splits: Vec<Split>,
        mut manifest: Manifest,
    ) -> Result<Self> {
        let (n, d, t) = values.dim();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        if splits.len() != n {
            return Err(DataError::Invalid(format!(
                "{} split tags for {n} instances",
                splits.len()
            )));
        }
        match &labels {
            Labels::None => {}
            Labels::Class(c) if c.len() != n => {
                return Err(DataError::Invalid(format!(
                    "{} class labels for {n} instances",
                    c.len()
                )))
            }
            Labels::Anomaly(a) if a.dim() != (n, t) => {
                return Err(DataError::Invalid(format!(
                    "anomaly flags shaped {:?}, expected ({n}, {t})",
                    a.dim()
                )))
            }
            _ => {}
        }
        manifest.d = d;
        manifest.t = t;
        manifest.label_kind = labels.kind();
        Ok(Self {
            values,
            labels,
            splits,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.len_of(Axis(1))
    }

    pub fn n_steps(&self) -> usize {
        self.values.len_of(Axis(2))
    }

    /// `[D × T]` view of one instance.
    pub fn instance(&self, i: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), i)
    }

    pub fn n_classes(&self) -> usize {
        self.labels
            .classes()
            .map(|c| c.iter().max().map_or(0, |m| m + 1))
            .unwrap_or(0)
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Fraction of flagged timesteps, if anomaly labels are present.
    pub fn anomaly_rate(&self) -> Option<f64> {
        self.labels
            .anomalies()
            .map(|a| a.iter().filter(|&&f| f).count() as f64 / a.len().max(1) as f64)
    }

    /// Keeps only the listed instances, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let values = self.values.select(Axis(0), idx);
        let labels = match &self.labels {
            Labels::None => Labels::None,
            Labels::Class(c) => Labels::Class(idx.iter().map(|&i| c[i]).collect()),
            Labels::Anomaly(a) => Labels::Anomaly(a.select(Axis(0), idx)),
        };
        Self {
            values,
            labels,
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            manifest: self.manifest.clone(),
        }
    }
}

/// Per-variable mean and (population) standard deviation of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Z-scores each variable independently. Without `stats`, they are computed on
/// the training split and applied to every split.
pub fn zscore_normalize(
    dataset: &TimeSeriesDataset,
    stats: Option<&NormalizationStats>,
) -> Result<(TimeSeriesDataset, NormalizationStats)> {
    let d = dataset.n_vars();
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != d || s.std.len() != d {
                return Err(DataError::Invalid(format!(
                    "stats cover {} variables, dataset has {d}",
                    s.mean.len()
                )));
            }
            s.clone()
        }
        None => training_stats(dataset)?,
    };
    let mut out = dataset.clone();
    for (v, mut lane) in out.values.axis_iter_mut(Axis(1)).enumerate() {
        let (m, sd) = (stats.mean[v], stats.std[v]);
        lane.mapv_inplace(|x| (x - m) / sd);
    }
    Ok((out, stats))
}

fn training_stats(dataset: &TimeSeriesDataset) -> Result<NormalizationStats> {
    let train = dataset.indices_of(Split::Train);
    if train.is_empty() {
        return Err(DataError::EmptyTrainSplit);
    }
    let d = dataset.n_vars();
    let count = (train.len() * dataset.n_steps()) as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for v in 0..d {
        let lanes = || {
            train
                .iter()
                .flat_map(move |&i| dataset.values.slice(s![i, v, ..]).into_iter().copied())
        };
        let m = lanes().sum::<f64>() / count;
        let var = lanes().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
        let sd = var.sqrt();
        mean[v] = m;
        std[v] = if sd > 1e-12 * m.abs().max(1.0) { sd } else { 1.0 };
    }
    Ok(NormalizationStats { mean, std })
}

/// Number of windows of `length` at `stride` in a series of `t` steps.
pub fn window_count(t: usize, length: usize, stride: usize) -> usize {
    if length > t || stride == 0 {
        0
    } else {
        (t - length) / stride + 1
    }
}

/// Slices every instance into windows; class labels are copied and anomaly
/// flags sliced alongside.
pub fn make_windows(
    dataset: &TimeSeriesDataset,
    length: usize,
    stride: usize,
) -> Result<TimeSeriesDataset> {
    let t = dataset.n_steps();
    if length > t {
        return Err(DataError::WindowTooLong { length, t });
    }
    if stride == 0 || length == 0 {
        return Err(DataError::InvalidParameter(
            "window length and stride must be at least 1".into(),
        ));
    }
    let per = window_count(t, length, stride);
    let (n, d) = (dataset.len(), dataset.n_vars());
    let mut values = Array3::zeros((n * per, d, length));
    let mut splits = Vec::with_capacity(n * per);
    let mut classes = Vec::new();
    let mut flags = Array2::from_elem((n * per, length), false);
    for i in 0..n {
        for w in 0..per {
            let row = i * per + w;
            let start = w * stride;
            values
                .index_axis_mut(Axis(0), row)
                .assign(&dataset.values.slice(s![i, .., start..start + length]));
            splits.push(dataset.splits[i]);
            match &dataset.labels {
                Labels::Class(c) => classes.push(c[i]),
                Labels::Anomaly(a) => flags
                    .row_mut(row)
                    .assign(&a.slice(s![i, start..start + length])),
                Labels::None => {}
            }
        }
    }
    let labels = match dataset.labels {
        Labels::None => Labels::None,
        Labels::Class(_) => Labels::Class(classes),
        Labels::Anomaly(_) => Labels::Anomaly(flags),
    };
    TimeSeriesDataset::new(values, labels, splits, dataset.manifest.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn manifest() -> Manifest {
        Manifest {
            name: "t".into(),
            d: 0,
            t: 0,
            layout: Layout::Long,
            label_kind: LabelKind::None,
            label_column: None,
            files: vec![],
            sampling_rate: None,
        }
    }

    fn dataset(values: Array3<f64>, splits: Vec<Split>) -> TimeSeriesDataset {
        TimeSeriesDataset::new(values, Labels::None, splits, manifest()).unwrap()
    }

    #[test]
    fn constant_variable_keeps_unit_std() {
        let ds = dataset(
            Array3::from_shape_vec((1, 1, 4), vec![2.0; 4]).unwrap(),
            vec![Split::Train],
        );
        let (out, stats) = zscore_normalize(&ds, None).unwrap();
        assert_eq!(stats.std, vec![1.0]);
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_series_maps_to_plus_minus_one() {
        let ds = dataset(
            Array3::from_shape_vec((1, 1, 2), vec![0.0, 2.0]).unwrap(),
            vec![Split::Train],
        );
        let (out, stats) = zscore_normalize(&ds, None).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(out.values.as_slice().unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn val_and_test_use_training_stats() {
        let ds = dataset(
            Array3::from_shape_vec((2, 1, 2), vec![0.0, 2.0, 10.0, 12.0]).unwrap(),
            vec![Split::Train, Split::Test],
        );
        let (out, _) = zscore_normalize(&ds, None).unwrap();
        assert_eq!(out.values.as_slice().unwrap(), &[-1.0, 1.0, 9.0, 11.0]);
    }

    #[test]
    fn renormalizing_with_fresh_stats_is_stable() {
        let ds = dataset(
            Array3::from_shape_fn((3, 2, 7), |(i, v, t)| (i * 7 + t) as f64 * (v as f64 + 0.5) + 3.0),
            vec![Split::Train; 3],
        );
        let (once, _) = zscore_normalize(&ds, None).unwrap();
        let (twice, stats) = zscore_normalize(&once, None).unwrap();
        for v in 0..2 {
            assert!(stats.mean[v].abs() < 1e-12);
            assert!((stats.std[v] - 1.0).abs() < 1e-12);
        }
        let (_, again) = zscore_normalize(&twice, None).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let ds = dataset(Array3::zeros((1, 1, 3)), vec![Split::Test]);
        assert!(matches!(
            zscore_normalize(&ds, None),
            Err(DataError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn window_identity_and_starts() {
        let ds = dataset(
            Array3::from_shape_fn((1, 1, 10), |(_, _, t)| t as f64),
            vec![Split::Train],
        );
        let same = make_windows(&ds, 10, 1).unwrap();
        assert_eq!(same.values, ds.values);

        let w = make_windows(&ds, 4, 3).unwrap();
        assert_eq!(w.len(), 3);
        let starts: Vec<f64> = (0..3).map(|i| w.values[[i, 0, 0]]).collect();
        assert_eq!(starts, vec![0.0, 3.0, 6.0]);

        assert!(matches!(
            make_windows(&ds, 11, 1),
            Err(DataError::WindowTooLong { length: 11, t: 10 })
        ));
    }

    #[test]
    fn windows_slice_anomaly_flags() {
        let flags = Array2::from_shape_fn((1, 6), |(_, t)| t == 4);
        let ds = TimeSeriesDataset::new(
            Array3::zeros((1, 1, 6)),
            Labels::Anomaly(flags),
            vec![Split::Train],
            manifest(),
        )
        .unwrap();
        let w = make_windows(&ds, 3, 3).unwrap();
        let a = w.labels.anomalies().unwrap();
        assert_eq!(a.row(0).to_vec(), vec![false, false, false]);
        assert_eq!(a.row(1).to_vec(), vec![false, true, false]);
    }

    #[test]
    fn constructor_rejects_nan() {
        let mut v = Array3::zeros((1, 1, 3));
        v[[0, 0, 1]] = f64::NAN;
        assert!(TimeSeriesDataset::new(v, Labels::None, vec![Split::Train], manifest()).is_err());
    }
}
