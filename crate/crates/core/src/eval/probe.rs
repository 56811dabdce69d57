//! Multinomial logistic-regression probe on frozen features.

use super::{EvalError, RepresentationSet, Result, TaskMetrics, TaskReport};
use crate::data::{Labels, Split};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Per-column affine map to zero mean and unit variance, fitted on the
/// training rows. Constant columns are centered but not scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
        let var = x
            .rows()
            .into_iter()
            .fold(Array1::<f64>::zeros(x.ncols()), |acc, r| acc + (&r - &mean).mapv(|v| v * v))
            / (x.nrows().max(1) as f64);
        let scale = var.mapv(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

/// Fitted probe: standardization followed by `softmax(x·W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub standardizer: Standardizer,
    /// `[features × classes]`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub iterations: usize,
}

impl Probe {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let z = self.standardizer.apply(x);
        let mut logits = z.dot(&self.weights) + &self.bias;
        for mut row in logits.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        logits
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        self.predict_proba(x)
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Mean cross-entropy plus `λ/2·‖W‖²` (bias unpenalized) and its gradient,
/// with `theta` holding `W` row-major followed by `b`.
fn objective(theta: &[f64], x: &Array2<f64>, y: &[usize], k: usize, l2: f64) -> (f64, Vec<f64>) {
    let f = x.ncols();
    let w = ArrayView2::from_shape((f, k), &theta[..f * k]).expect("weight block");
    let b = &theta[f * k..];
    let mut logits = x.dot(&w);
    let n = y.len() as f64;
    let mut loss = 0.0;
    for (mut row, &label) in logits.rows_mut().into_iter().zip(y) {
        let r = row.as_slice_mut().expect("standard layout");
        for (v, bj) in r.iter_mut().zip(b) {
            *v += bj;
        }
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - r[label];
        for v in r.iter_mut() {
            *v = (*v - lse).exp();
        }
        r[label] -= 1.0;
        for v in r.iter_mut() {
            *v /= n;
        }
    }
    loss /= n;
    let gw = x.t().dot(&logits) + &w * l2;
    let gb = logits.sum_axis(Axis(0));
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    let mut grad: Vec<f64> = gw.iter().copied().collect();
    grad.extend(gb.iter());
    (loss, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const LBFGS_MEMORY: usize = 10;
const MAX_ITERATIONS: usize = 500;
const GRAD_TOLERANCE: f64 = 1e-7;

/// Limited-memory BFGS with Armijo backtracking. Fully deterministic: same
/// inputs give the same iterates bit for bit.
fn lbfgs(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), mut x: Vec<f64>) -> (Vec<f64>, usize) {
    let (mut fx, mut g) = f(&x);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    for iter in 0..MAX_ITERATIONS {
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax < GRAD_TOLERANCE {
            return (x, iter);
        }
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map_or(1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt(), |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let beta = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - beta) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            return (x, iter);
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let converged = (fx - fnew).abs() <= 1e-14 * fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if converged {
            return (x, iter + 1);
        }
    }
    (x, MAX_ITERATIONS)
}

/// Fits the probe on `x` (`[N × F]`) and labels in `0..n_classes`.
pub fn fit_probe(x: ArrayView2<'_, f64>, y: &[usize], n_classes: usize, l2_strength: f64) -> Result<Probe> {
    if !(l2_strength >= 0.0 && l2_strength.is_finite()) {
        return Err(EvalError::Invalid(format!("l2_strength must be finite and >= 0, got {l2_strength}")));
    }
    if x.nrows() != y.len() {
        return Err(EvalError::Invalid(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if x.nrows() == 0 {
        return Err(EvalError::EmptySplit { split: "train" });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(EvalError::Invalid(format!("label {bad} outside 0..{n_classes}")));
    }
    if y.iter().all(|&c| c == y[0]) {
        return Err(EvalError::SingleClassSplit { split: "train" });
    }
    let standardizer = Standardizer::fit(x);
    let z = standardizer.apply(x);
    let f = z.ncols();
    let theta0 = vec![0.0; (f + 1) * n_classes];
    let (theta, iterations) = lbfgs(|t| objective(t, &z, y, n_classes, l2_strength), theta0);
    let weights = Array2::from_shape_vec((f, n_classes), theta[..f * n_classes].to_vec()).expect("weight block");
    let bias = Array1::from(theta[f * n_classes..].to_vec());
    Ok(Probe {
        standardizer,
        weights,
        bias,
        iterations,
    })
}

/// Average precision of `scores` against binary `positive` flags. Tied
/// scores enter the curve together as one step.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_tp = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            group_tp += positive[order[j]] as usize;
            j += 1;
        }
        tp += group_tp;
        seen += j - i;
        ap += (tp as f64 / seen as f64) * (group_tp as f64 / total as f64);
        i = j;
    }
    Some(ap)
}

/// Macro one-vs-rest average precision over classes present in `labels`.
pub fn macro_auprc(proba: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let aps: Vec<f64> = (0..proba.ncols())
        .filter_map(|c| {
            let scores: Vec<f64> = proba.column(c).to_vec();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            average_precision(&scores, &pos)
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyMetrics {
    pub accuracy: f64,
    pub auprc: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub l2_strength: f64,
}

/// Metrics plus the test-set predictions behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub metrics: ClassifyMetrics,
    pub test_indices: Vec<usize>,
    pub predictions: Vec<usize>,
    pub truth: Vec<usize>,
}

impl ProbeOutcome {
    /// Test instances the probe got wrong.
    pub fn errors(&self) -> Vec<usize> {
        self.test_indices
            .iter()
            .zip(self.predictions.iter().zip(&self.truth))
            .filter(|(_, (p, t))| p != t)
            .map(|(&i, _)| i)
            .collect()
    }
}

/// Trains on the train split of `features` and scores the test split.
pub fn probe_on_features(
    features: ArrayView2<'_, f64>,
    labels: &Labels,
    splits: &[Split],
    l2_strength: f64,
) -> Result<ProbeOutcome> {
    let classes = labels.classes().ok_or(EvalError::MissingLabels("class"))?;
    let n_classes = classes.iter().copied().max().map_or(0, |c| c + 1);
    let pick = |split: Split| -> Vec<usize> { (0..splits.len()).filter(|&i| splits[i] == split).collect() };
    let (train, test) = (pick(Split::Train), pick(Split::Test));
    if test.is_empty() {
        return Err(EvalError::EmptySplit { split: "test" });
    }
    let y_train: Vec<usize> = train.iter().map(|&i| classes[i]).collect();
    let probe = fit_probe(features.select(Axis(0), &train).view(), &y_train, n_classes, l2_strength)?;
    let x_test = features.select(Axis(0), &test);
    let truth: Vec<usize> = test.iter().map(|&i| classes[i]).collect();
    let proba = probe.predict_proba(x_test.view());
    let predictions: Vec<usize> = proba
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("standard layout")))
        .collect();
    let correct = predictions.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(ProbeOutcome {
        metrics: ClassifyMetrics {
            accuracy: correct as f64 / test.len() as f64,
            auprc: macro_auprc(proba.view(), &truth),
            n_train: train.len(),
            n_test: test.len(),
            n_classes,
            l2_strength,
        },
        test_indices: test,
        predictions,
        truth,
    })
}

/// Linear probe on the fused representations.
pub fn linear_probe_classify(reps: &RepresentationSet, l2_strength: f64) -> Result<TaskReport> {
    let outcome = probe_on_features(reps.reps.view(), &reps.labels, &reps.splits, l2_strength)?;
    let mut warnings = Vec::new();
    let test_classes: std::collections::BTreeSet<usize> = outcome.truth.iter().copied().collect();
    if test_classes.len() < outcome.metrics.n_classes {
        warnings.push(format!(
            "test split covers {} of {} classes; AUPRC averages over present classes",
            test_classes.len(),
            outcome.metrics.n_classes
        ));
    }
    Ok(TaskReport {
        metrics: TaskMetrics::Classify(outcome.metrics),
        warnings,
        config: serde_json::json!({ "l2_strength": l2_strength }),
    })
}
