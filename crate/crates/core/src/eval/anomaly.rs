//! Reconstruction-based anomaly detection on frozen representations.

use super::{extract_representations, EvalError, Result, TaskMetrics, TaskReport};
use crate::data::{Split, TimeSeriesDataset};
use crate::layers::{conv, same_offsets};
use crate::model::{Init, Model, ParamSpec, ParamStore};
use crate::tensor::{Mat, Tape};
use crate::train::Adam;
use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Decoder from a representation back to its `[T × D]` series: a linear
/// layer to `T + 2p` rows of `hidden_channels`, tanh, then a centered
/// convolution of width `kernel = 2p + 1`. The `p` extra rows at each end
/// give the convolution context and are dropped from the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden_channels: usize,
    pub kernel: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 8,
            kernel: 5,
            steps: 300,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(EvalError::Invalid(
                "decoder needs hidden_channels >= 1 and an odd kernel".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EvalError::Invalid(format!("decoder learning_rate {} must be > 0", self.learning_rate)));
        }
        Ok(())
    }
}

/// How the flagging threshold `τ` on reconstruction error is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    /// Threshold with the best F1 on the validation split.
    #[default]
    BestF1,
    /// A given threshold.
    Fixed { tau: f64 },
}

/// Detection quality when flagging `score > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flagged: usize,
}

fn point(threshold: f64, tp: usize, flagged: usize, positives: usize) -> ThresholdPoint {
    let precision = if flagged == 0 { 0.0 } else { tp as f64 / flagged as f64 };
    let recall = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ThresholdPoint {
        threshold,
        precision,
        recall,
        f1,
        flagged,
    }
}

/// Precision, recall and F1 of flagging `scores > threshold`.
pub fn evaluate_scores(scores: &[f64], labels: &[bool], threshold: f64) -> ThresholdPoint {
    let positives = labels.iter().filter(|&&l| l).count();
    let mut tp = 0;
    let mut flagged = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s > threshold {
            flagged += 1;
            tp += l as usize;
        }
    }
    point(threshold, tp, flagged, positives)
}

/// Every distinct outcome of a threshold: one point above the maximum score,
/// one at each midpoint between consecutive distinct scores and one below
/// the minimum. Ordered by decreasing threshold.
pub fn threshold_sweep(scores: &[f64], labels: &[bool]) -> Vec<ThresholdPoint> {
    let positives = labels.iter().filter(|&&l| l).count();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let Some(&top) = order.first() else {
        return vec![];
    };
    let mut out = vec![point(scores[top] + 1.0, 0, 0, positives)];
    let (mut tp, mut i) = (0, 0);
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            tp += labels[order[i]] as usize;
            i += 1;
        }
        let threshold = match order.get(i) {
            Some(&next) => 0.5 * (v + scores[next]),
            None => v - 1.0,
        };
        out.push(point(threshold, tp, i, positives));
    }
    out
}

/// Per-timestep score: the largest absolute error over variables.
/// `x` and `recon` are `[D × T]`.
pub fn reconstruction_scores(x: ArrayView2<'_, f64>, recon: ArrayView2<'_, f64>) -> Vec<f64> {
    (0..x.ncols())
        .map(|t| {
            x.column(t)
                .iter()
                .zip(recon.column(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

struct Decoder {
    config: DecoderConfig,
    params: ParamStore,
    t: usize,
    d: usize,
}

impl Decoder {
    fn pad(&self) -> usize {
        self.config.kernel / 2
    }

    fn rows(&self) -> usize {
        self.t + 2 * self.pad()
    }

    fn new(config: &DecoderConfig, rep_dim: usize, t: usize, d: usize) -> Self {
        let c = config.hidden_channels;
        let rows = t + 2 * (config.kernel / 2);
        let specs = [
            ParamSpec::new("decoder.hidden.w", rep_dim, rows * c, Init::Scaled { fan_in: rep_dim }),
            ParamSpec::new("decoder.hidden.b", 1, rows * c, Init::Zeros),
            ParamSpec::new("decoder.conv.w", config.kernel * c, d, Init::Scaled { fan_in: config.kernel * c }),
            ParamSpec::new("decoder.conv.b", 1, d, Init::Zeros),
        ];
        Self {
            config: config.clone(),
            params: ParamStore::from_specs(&specs, config.seed),
            t,
            d,
        }
    }

    /// Records the decoder on `tape` for `reps` (`[N × F]`); the output is
    /// `[N·(T+2p) × D]`, instance-major.
    fn forward(&self, tape: &mut Tape<'_>, reps: &Array2<f64>) -> Result<crate::tensor::Var> {
        let p = |name: &str| self.params.var(tape, name);
        let (hw, hb, cw, cb) = (p("decoder.hidden.w")?, p("decoder.hidden.b")?, p("decoder.conv.w")?, p("decoder.conv.b")?);
        let r = tape.constant(reps.clone());
        let h = tape.matmul(r, hw);
        let h = tape.add_bias(h, hb);
        let h = tape.tanh(h);
        let h = tape.reshape(h, reps.nrows() * self.rows(), self.config.hidden_channels);
        Ok(conv(tape, h, cw, Some(cb), &same_offsets(self.config.kernel, 1)))
    }

    /// `[D × T]` reconstruction of instance `i` from the stacked output.
    fn slice(&self, out: &Mat, i: usize) -> Array2<f64> {
        let start = i * self.rows() + self.pad();
        out.slice(s![start..start + self.t, ..]).t().to_owned()
    }

    /// Full-batch Adam on the mean squared error over unflagged timesteps.
    fn fit(&mut self, reps: &Array2<f64>, targets: &[ArrayView2<'_, f64>], masks: &[Vec<bool>]) -> Result<f64> {
        let count = masks.iter().flatten().filter(|&&m| m).count() * self.d;
        if count == 0 {
            return Err(EvalError::Invalid("no normal training timesteps for the decoder".into()));
        }
        let mut adam = Adam::new(&self.params);
        let mut last = f64::NAN;
        for _ in 0..self.config.steps {
            let (loss, grads) = {
                let mut tape = Tape::new(self.params.values());
                let out = self.forward(&mut tape, reps)?;
                let value = tape.value(out);
                let mut seed = Mat::zeros(value.dim());
                let mut loss = 0.0;
                for (i, (x, mask)) in targets.iter().zip(masks).enumerate() {
                    let base = i * self.rows() + self.pad();
                    for (t, &keep) in mask.iter().enumerate() {
                        if !keep {
                            continue;
                        }
                        for v in 0..self.d {
                            let e = value[[base + t, v]] - x[[v, t]];
                            loss += e * e;
                            seed[[base + t, v]] = 2.0 * e / count as f64;
                        }
                    }
                }
                let g = tape.backward(out, seed);
                let grads: Vec<Mat> = g
                    .params
                    .into_iter()
                    .zip(self.params.values())
                    .map(|(g, p)| g.unwrap_or_else(|| Mat::zeros(p.dim())))
                    .collect();
                (loss / count as f64, grads)
            };
            if !loss.is_finite() {
                return Err(EvalError::Invalid(format!("decoder loss became {loss}")));
            }
            last = loss;
            adam.step(self.params.values_mut(), &grads, self.config.learning_rate, 0.0);
        }
        Ok(last)
    }

    fn reconstruct(&self, reps: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new(self.params.values());
        let out = self.forward(&mut tape, reps)?;
        let value = tape.value(out);
        Ok((0..reps.nrows()).map(|i| self.slice(value, i)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub threshold_policy: ThresholdPolicy,
    /// Share of test timesteps flagged.
    pub flag_rate: f64,
    /// Share of test timesteps labeled anomalous.
    pub anomaly_rate: f64,
    /// Expected F1 of flagging the same share of timesteps at random:
    /// precision equals the anomaly rate and recall the flag rate.
    pub random_baseline_f1: f64,
    pub decoder_final_loss: f64,
    pub n_test_points: usize,
    /// Validation sweep that picked the threshold (empty for fixed policy).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<ThresholdPoint>,
}

/// `2aq / (a + q)`, or zero when both rates are zero.
pub fn random_baseline_f1(anomaly_rate: f64, flag_rate: f64) -> f64 {
    if anomaly_rate + flag_rate == 0.0 {
        0.0
    } else {
        2.0 * anomaly_rate * flag_rate / (anomaly_rate + flag_rate)
    }
}

fn split_points(
    idx: &[usize],
    scores: &[Vec<f64>],
    flags: &Array2<bool>,
) -> (Vec<f64>, Vec<bool>) {
    let s = idx.iter().flat_map(|&i| scores[i].iter().copied()).collect();
    let l = idx.iter().flat_map(|&i| flags.row(i).to_vec()).collect();
    (s, l)
}

/// Trains the decoder on the train split (anomalous timesteps masked out),
/// picks the threshold per `policy` and reports detection on the test split.
pub fn anomaly_eval(
    model: &Model,
    dataset: &TimeSeriesDataset,
    decoder: &DecoderConfig,
    policy: ThresholdPolicy,
) -> Result<TaskReport> {
    decoder.validate()?;
    let flags = dataset.labels.anomalies().ok_or(EvalError::MissingLabels("anomaly"))?;
    let (train, val, test) = (
        dataset.indices_of(Split::Train),
        dataset.indices_of(Split::Val),
        dataset.indices_of(Split::Test),
    );
    if train.is_empty() {
        return Err(EvalError::EmptySplit { split: "train" });
    }
    if test.is_empty() {
        return Err(EvalError::EmptySplit { split: "test" });
    }
    if !test.iter().any(|&i| flags.row(i).iter().any(|&f| f)) {
        return Err(EvalError::NoAnomaliesInTest);
    }
    if let ThresholdPolicy::Fixed { tau } = policy {
        if !tau.is_finite() {
            return Err(EvalError::Invalid(format!("fixed threshold {tau} is not finite")));
        }
    }
    let reps = extract_representations(model, dataset)?;
    let mut dec = Decoder::new(decoder, reps.reps.ncols(), dataset.n_steps(), dataset.n_vars());
    let train_reps = reps.reps.select(Axis(0), &train);
    let targets: Vec<_> = train.iter().map(|&i| dataset.instance(i)).collect();
    let masks: Vec<Vec<bool>> = train.iter().map(|&i| flags.row(i).iter().map(|f| !f).collect()).collect();
    let final_loss = dec.fit(&train_reps, &targets, &masks)?;
    let recon = dec.reconstruct(&reps.reps)?;
    let scores: Vec<Vec<f64>> = (0..dataset.len())
        .map(|i| reconstruction_scores(dataset.instance(i), recon[i].view()))
        .collect();

    let mut warnings = Vec::new();
    let (threshold, sweep) = match policy {
        ThresholdPolicy::Fixed { tau } => (tau, vec![]),
        ThresholdPolicy::BestF1 => {
            let has_val_anomalies = val.iter().any(|&i| flags.row(i).iter().any(|&f| f));
            let select = if has_val_anomalies {
                &val
            } else {
                warnings.push("validation split has no anomalies; threshold chosen on the train split".into());
                &train
            };
            let (s, l) = split_points(select, &scores, flags);
            let sweep = threshold_sweep(&s, &l);
            let best = sweep
                .iter()
                .fold(None::<&ThresholdPoint>, |best, p| match best {
                    Some(b) if b.f1 >= p.f1 => Some(b),
                    _ => Some(p),
                })
                .expect("non-empty sweep");
            (best.threshold, sweep)
        }
    };
    let (s, l) = split_points(&test, &scores, flags);
    let result = evaluate_scores(&s, &l, threshold);
    if result.flagged == 0 {
        warnings.push("no test timestep exceeds the threshold; precision reported as 0".into());
    }
    let n = s.len() as f64;
    let anomaly_rate = l.iter().filter(|&&f| f).count() as f64 / n;
    let flag_rate = result.flagged as f64 / n;
    Ok(TaskReport {
        metrics: TaskMetrics::Anomaly(AnomalyMetrics {
            precision: result.precision,
            recall: result.recall,
            f1: result.f1,
            threshold,
            threshold_policy: policy,
            flag_rate,
            anomaly_rate,
            random_baseline_f1: random_baseline_f1(anomaly_rate, flag_rate),
            decoder_final_loss: final_loss,
            n_test_points: s.len(),
            sweep,
        }),
        warnings,
        config: serde_json::json!({ "decoder": decoder, "threshold_policy": policy }),
    })
}
