//! Alignment, uniformity and false-prediction overlap diagnostics.

use super::{extract_features, probe_on_features, series_features, EvalError, ProbeOutcome, Result};
use crate::augment::{apply_policy, AugmentPolicy, PolicyKind};
use crate::data::TimeSeriesDataset;
use crate::model::Model;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Number of distance bins covering `[0, 2]`.
pub const HISTOGRAM_BINS: usize = 40;
pub const HISTOGRAM_WIDTH: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub mean: f64,
    pub n_pairs: usize,
    /// Counts per bin `[k·0.05, (k+1)·0.05)`; a distance of exactly 2 falls
    /// in the last bin.
    pub histogram: Vec<usize>,
}

impl AlignmentSummary {
    /// `bin_start,bin_end,count` rows with a header.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (k, c) in self.histogram.iter().enumerate() {
            let lo = k as f64 * HISTOGRAM_WIDTH;
            out.push_str(&format!("{lo:.2},{:.2},{c}\n", lo + HISTOGRAM_WIDTH));
        }
        out
    }
}

/// Euclidean distances between row `i` of `a` and row `i` of `b`.
pub fn alignment_metric(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<AlignmentSummary> {
    if a.dim() != b.dim() {
        return Err(EvalError::Invalid(format!("pair shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let mut histogram = vec![0; HISTOGRAM_BINS];
    let mut sum = 0.0;
    for (x, y) in a.rows().into_iter().zip(b.rows()) {
        let dist = (&x - &y).mapv(|v| v * v).sum().sqrt();
        sum += dist;
        let bin = ((dist / HISTOGRAM_WIDTH).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    let n_pairs = a.nrows();
    Ok(AlignmentSummary {
        mean: if n_pairs == 0 { 0.0 } else { sum / n_pairs as f64 },
        n_pairs,
        histogram,
    })
}

/// Alignment of a model: each listed instance is augmented twice with
/// `policy`, using view seeds drawn from `seed`, and both views are encoded.
pub fn positive_pair_alignment(
    model: &Model,
    dataset: &TimeSeriesDataset,
    indices: &[usize],
    policy: &PolicyKind,
    seed: u64,
) -> Result<AlignmentSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &i in indices {
        let x = dataset.instance(i);
        for out in [&mut first, &mut second] {
            let view = apply_policy(x, &AugmentPolicy::new(policy.clone(), rng.random())?)?;
            out.extend(series_features(model, view.view())?.flat);
        }
    }
    let width = model.config.rep_dim();
    let a = Array2::from_shape_vec((indices.len(), width), first).expect("rep width");
    let b = Array2::from_shape_vec((indices.len(), width), second).expect("rep width");
    alignment_metric(a.view(), b.view())
}

/// `log mean_{i<j} exp(−2‖f_i − f_j‖²)`, evaluated with log-sum-exp.
pub fn uniformity_metric(reps: ArrayView2<'_, f64>) -> Result<f64> {
    let n = reps.nrows();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let mut exponents = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2 = (&reps.row(i) - &reps.row(j)).mapv(|v| v * v).sum();
            exponents.push(-2.0 * d2);
        }
    }
    let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exponents.iter().map(|e| (e - max).exp()).sum();
    Ok(max + (sum / exponents.len() as f64).ln())
}

/// Shared test errors of a temporal-only and a spectral-only probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub n_test: usize,
    pub temporal_errors: usize,
    pub spectral_errors: usize,
    pub intersection: usize,
    /// Intersection as a percentage of the temporal errors; `None` when the
    /// temporal probe made no errors.
    pub percent_of_temporal: Option<f64>,
    pub percent_of_spectral: Option<f64>,
    /// Set when both probes are perfect and the overlap is 0/0.
    pub undefined: bool,
    pub temporal_accuracy: f64,
    pub spectral_accuracy: f64,
}

pub fn overlap_from_predictions(temporal: &ProbeOutcome, spectral: &ProbeOutcome) -> Result<OverlapReport> {
    if temporal.test_indices != spectral.test_indices {
        return Err(EvalError::Invalid("probes were scored on different test sets".into()));
    }
    let te: BTreeSet<usize> = temporal.errors().into_iter().collect();
    let se: BTreeSet<usize> = spectral.errors().into_iter().collect();
    let inter = te.intersection(&se).count();
    let pct = |set: &BTreeSet<usize>| (!set.is_empty()).then(|| 100.0 * inter as f64 / set.len() as f64);
    Ok(OverlapReport {
        n_test: temporal.test_indices.len(),
        temporal_errors: te.len(),
        spectral_errors: se.len(),
        intersection: inter,
        percent_of_temporal: pct(&te),
        percent_of_spectral: pct(&se),
        undefined: te.is_empty() && se.is_empty(),
        temporal_accuracy: temporal.metrics.accuracy,
        spectral_accuracy: spectral.metrics.accuracy,
    })
}

/// Trains one probe on the last S2T output and one on the last T2S output,
/// then compares their misclassified test instances.
pub fn false_prediction_overlap(model: &Model, dataset: &TimeSeriesDataset, l2_strength: f64) -> Result<OverlapReport> {
    let feats = extract_features(model, dataset)?;
    let temporal = probe_on_features(feats.s2t.view(), &feats.labels, &feats.splits, l2_strength)?;
    let spectral = probe_on_features(feats.t2s.view(), &feats.labels, &feats.splits, l2_strength)?;
    overlap_from_predictions(&temporal, &spectral)
}

#[cfg(test)]
mod tests {
    use super::super::ClassifyMetrics;
    use super::*;
    use crate::data::{synth_freq_classes, FreqClassMode};
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn unit_rows(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
        for mut r in a.rows_mut() {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        a
    }

    #[test]
    fn alignment_examples() {
        let a = unit_rows(5, 3, 1);
        let s = alignment_metric(a.view(), a.view()).unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.histogram[0], 5);
        let neg = -&a;
        let s = alignment_metric(a.view(), neg.view()).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-15);
        assert_eq!(s.histogram[HISTOGRAM_BINS - 1], 5);
        assert_eq!(s.histogram.iter().sum::<usize>(), 5);
        assert_eq!(s.histogram_csv().lines().count(), HISTOGRAM_BINS + 1);
        assert!(alignment_metric(a.view(), a.slice(ndarray::s![..2, ..])).is_err());
    }

    #[test]
    fn random_high_dimensional_pairs_are_near_sqrt_two() {
        let a = unit_rows(1000, 512, 2);
        let b = unit_rows(1000, 512, 3);
        let s = alignment_metric(a.view(), b.view()).unwrap();
        assert!((s.mean / 2f64.sqrt() - 1.0).abs() < 0.05, "{}", s.mean);
    }

    #[test]
    fn uniformity_examples() {
        let same = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        assert_eq!(uniformity_metric(same.view()).unwrap(), 0.0);
        let antipodal = array![[0.6, 0.8], [-0.6, -0.8]];
        assert!((uniformity_metric(antipodal.view()).unwrap() + 8.0).abs() < 1e-12);
        let eye = Array2::<f64>::eye(6);
        assert!((uniformity_metric(eye.view()).unwrap() + 4.0).abs() < 1e-12);
        assert!(matches!(uniformity_metric(eye.slice(ndarray::s![..1, ..])), Err(EvalError::TooFewSamples(1))));
        let random = unit_rows(50, 8, 4);
        assert!(uniformity_metric(random.view()).unwrap() <= 0.0);
    }

    fn outcome(predictions: Vec<usize>, truth: Vec<usize>) -> ProbeOutcome {
        let n = truth.len();
        let correct = predictions.iter().zip(&truth).filter(|(p, t)| p == t).count();
        ProbeOutcome {
            metrics: ClassifyMetrics {
                accuracy: correct as f64 / n as f64,
                auprc: 1.0,
                n_train: 0,
                n_test: n,
                n_classes: 2,
                l2_strength: 0.0,
            },
            test_indices: (10..10 + n).collect(),
            predictions,
            truth,
        }
    }

    #[test]
    fn overlap_examples() {
        let perfect = outcome(vec![0, 1, 0], vec![0, 1, 0]);
        let r = overlap_from_predictions(&perfect, &perfect).unwrap();
        assert!(r.undefined);
        assert_eq!(r.percent_of_temporal, None);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("NaN"));

        let flawed = outcome(vec![1, 1, 1], vec![0, 1, 0]);
        let r = overlap_from_predictions(&flawed, &flawed).unwrap();
        assert_eq!(r.intersection, 2);
        assert_eq!(r.percent_of_temporal, Some(100.0));
        assert_eq!(r.percent_of_spectral, Some(100.0));
        assert!(!r.undefined);

        let other = outcome(vec![1, 0, 0], vec![0, 1, 0]);
        let r = overlap_from_predictions(&flawed, &other).unwrap();
        assert_eq!((r.temporal_errors, r.spectral_errors, r.intersection), (2, 2, 1));
        assert_eq!(r.percent_of_temporal, Some(50.0));
    }

    #[test]
    fn model_diagnostics_are_reproducible() {
        let ds = synth_freq_classes(2, 10, 2, 32, FreqClassMode::Mixed, 0.1, 3).unwrap();
        let model = super::super::tests::small_model(2);
        let idx: Vec<usize> = (0..8).collect();
        let policy = PolicyKind::Dropout { rate: 0.1 };
        let a = positive_pair_alignment(&model, &ds, &idx, &policy, 9).unwrap();
        let b = positive_pair_alignment(&model, &ds, &idx, &policy, 9).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert!(a.mean > 0.0);
        let report = false_prediction_overlap(&model, &ds, 0.1).unwrap();
        assert_eq!(report.n_test, 4);
    }
}
