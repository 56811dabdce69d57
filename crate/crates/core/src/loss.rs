//! Contrastive objective over unit-norm joint representations.

use crate::augment::TupleIndex;
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("vector is not unit norm (norm {norm})")]
    NotNormalized { norm: f64 },
    #[error("anchor {anchor} has no negatives")]
    EmptyNegatives { anchor: usize },
    #[error("literal loss undefined: {0}")]
    DomainError(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("{0}")]
    LengthMismatch(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `-log softmax` of the positive among the temperature-scaled similarities.
    #[default]
    Infonce,
    /// `-log(s_pos/τ) + mean_k log(s_neg_k/τ)`, defined only for positive
    /// similarities.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub form: LossForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            form: LossForm::Infonce,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(LossError::InvalidTemperature(self.temperature))
        }
    }
}

const NORM_TOLERANCE: f64 = 1e-6;

fn check_unit(v: ArrayView1<'_, f64>) -> Result<()> {
    let norm = v.dot(&v).sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(LossError::NotNormalized { norm });
    }
    Ok(())
}

/// Inner product of two unit vectors.
pub fn similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_unit(a)?;
    check_unit(b)?;
    Ok(a.dot(&b))
}

/// Loss of one anchor with its derivatives with respect to `s_pos` and each
/// `s_neg`.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleLoss {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: Vec<f64>,
}

/// Loss of one anchor from its similarities.
pub fn tuple_loss(s_pos: f64, s_neg: &[f64], config: &LossConfig) -> Result<TupleLoss> {
    config.validate()?;
    if s_neg.is_empty() {
        return Err(LossError::EmptyNegatives { anchor: 0 });
    }
    let tau = config.temperature;
    match config.form {
        LossForm::Infonce => {
            // loss = log Σ_k exp(g_k) with g_0 = 0 and g_k = (s_neg_k - s_pos)/τ.
            let gaps: Vec<f64> = s_neg.iter().map(|s| (s - s_pos) / tau).collect();
            let top = gaps.iter().copied().fold(0.0, f64::max);
            let tail: f64 = gaps.iter().map(|g| (g - top).exp()).sum();
            let head = (-top).exp();
            let loss = if top == 0.0 {
                tail.ln_1p()
            } else {
                top + (head + tail).ln()
            };
            let total = head + tail;
            let d_neg: Vec<f64> = gaps.iter().map(|g| (g - top).exp() / total / tau).collect();
            let d_pos = -d_neg.iter().sum::<f64>();
            Ok(TupleLoss { loss, d_pos, d_neg })
        }
        LossForm::Literal => {
            if s_pos <= 0.0 {
                return Err(LossError::DomainError(format!("log of s_pos/τ with s_pos = {s_pos}")));
            }
            if let Some(bad) = s_neg.iter().find(|&&s| s <= 0.0) {
                return Err(LossError::DomainError(format!("log of s_neg/τ with s_neg = {bad}")));
            }
            let k = s_neg.len() as f64;
            let loss = -(s_pos / tau).ln() + s_neg.iter().map(|s| (s / tau).ln()).sum::<f64>() / k;
            Ok(TupleLoss {
                loss,
                d_pos: -1.0 / s_pos,
                d_neg: s_neg.iter().map(|s| 1.0 / (k * s)).collect(),
            })
        }
    }
}

/// Mean loss over a batch and its gradient with respect to every view.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    /// `∂loss/∂view`, one per input view (zero for unused views).
    pub grads: Vec<Array1<f64>>,
}

fn batch_loss_impl(
    views: &[ArrayView1<'_, f64>],
    tuples: &[TupleIndex],
    config: &LossConfig,
    check_norms: bool,
) -> Result<BatchLoss> {
    config.validate()?;
    if tuples.is_empty() {
        return Err(LossError::LengthMismatch("batch has no anchors".into()));
    }
    let dim = views.first().map_or(0, |v| v.len());
    if let Some(v) = views.iter().find(|v| v.len() != dim) {
        return Err(LossError::LengthMismatch(format!("views of length {dim} and {}", v.len())));
    }
    if check_norms {
        for v in views {
            check_unit(*v)?;
        }
    }
    let scale = 1.0 / tuples.len() as f64;
    let mut grads = vec![Array1::zeros(dim); views.len()];
    let mut per_anchor = Vec::with_capacity(tuples.len());
    for (i, t) in tuples.iter().enumerate() {
        if t.negatives.is_empty() {
            return Err(LossError::EmptyNegatives { anchor: i });
        }
        let a = views[t.anchor];
        let s_pos = a.dot(&views[t.positive]);
        let s_neg: Vec<f64> = t.negatives.iter().map(|&j| a.dot(&views[j])).collect();
        let tl = tuple_loss(s_pos, &s_neg, config)?;
        per_anchor.push(tl.loss);
        grads[t.anchor].scaled_add(scale * tl.d_pos, &views[t.positive]);
        grads[t.positive].scaled_add(scale * tl.d_pos, &a);
        for (&j, &dn) in t.negatives.iter().zip(&tl.d_neg) {
            grads[t.anchor].scaled_add(scale * dn, &views[j]);
            grads[j].scaled_add(scale * dn, &a);
        }
    }
    let loss = per_anchor.iter().sum::<f64>() * scale;
    Ok(BatchLoss {
        loss,
        per_anchor,
        grads,
    })
}

/// Mean contrastive loss over `tuples`, whose indices point into `views`.
/// Every view must be unit norm.
pub fn batch_loss(
    views: &[ArrayView1<'_, f64>],
    tuples: &[TupleIndex],
    config: &LossConfig,
) -> Result<BatchLoss> {
    batch_loss_impl(views, tuples, config, true)
}

/// [`batch_loss`] without the unit-norm check, for finite-difference probes
/// that step off the sphere.
pub fn batch_loss_unchecked(
    views: &[ArrayView1<'_, f64>],
    tuples: &[TupleIndex],
    config: &LossConfig,
) -> Result<BatchLoss> {
    batch_loss_impl(views, tuples, config, false)
}

/// Mean contrastive loss for explicit anchor, positive and negative vectors.
pub fn contrastive_loss(
    anchors: &[ArrayView1<'_, f64>],
    positives: &[ArrayView1<'_, f64>],
    negatives: &[Vec<ArrayView1<'_, f64>>],
    config: &LossConfig,
) -> Result<f64> {
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} anchors, {} positives, {} negative sets",
            anchors.len(),
            positives.len(),
            negatives.len()
        )));
    }
    let mut views = Vec::new();
    let mut tuples = Vec::new();
    for ((a, p), negs) in anchors.iter().zip(positives).zip(negatives) {
        let base = views.len();
        views.push(*a);
        views.push(*p);
        views.extend(negs.iter().copied());
        tuples.push(TupleIndex {
            anchor: base,
            positive: base + 1,
            negatives: (base + 2..base + 2 + negs.len()).collect(),
        });
    }
    Ok(batch_loss(&views, &tuples, config)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn infonce(s_pos: f64, s_neg: &[f64], tau: f64) -> f64 {
        let cfg = LossConfig {
            temperature: tau,
            form: LossForm::Infonce,
        };
        tuple_loss(s_pos, s_neg, &cfg).unwrap().loss
    }

    #[test]
    fn similarity_examples() {
        let a = array![0.6, 0.8];
        assert!((similarity(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(a.view(), array![-0.8, 0.6].view()).unwrap(), 0.0);
        assert!((similarity(a.view(), (-&a).view()).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            similarity(array![1.0, 1.0].view(), a.view()),
            Err(LossError::NotNormalized { .. })
        ));
    }

    #[test]
    fn closed_form_values() {
        let want = (-20f64).exp().ln_1p();
        assert!((infonce(1.0, &[0.0], 0.05) - want).abs() < 1e-12);
        assert!((infonce(1.0, &[0.0], 0.05) - 2.061e-9).abs() < 1e-12);
        assert!((infonce(0.3, &[0.3], 0.05) - 2f64.ln()).abs() < 1e-12);
        assert!((infonce(-0.2, &[-0.2, -0.2, -0.2], 0.5) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn literal_form_and_domain_guard() {
        let cfg = LossConfig {
            temperature: 0.5,
            form: LossForm::Literal,
        };
        let l = tuple_loss(0.5, &[0.25, 0.5], &cfg).unwrap();
        let want = -(1.0f64).ln() + ((0.5f64).ln() + 1.0f64.ln()) / 2.0;
        assert!((l.loss - want).abs() < 1e-15);
        assert!(matches!(tuple_loss(-0.1, &[0.2], &cfg), Err(LossError::DomainError(_))));
        assert!(matches!(tuple_loss(0.1, &[0.0], &cfg), Err(LossError::DomainError(_))));
    }

    #[test]
    fn errors() {
        let cfg = LossConfig::default();
        assert!(matches!(tuple_loss(0.1, &[], &cfg), Err(LossError::EmptyNegatives { .. })));
        let bad = LossConfig {
            temperature: 0.0,
            ..cfg
        };
        assert!(matches!(tuple_loss(0.1, &[0.0], &bad), Err(LossError::InvalidTemperature(_))));
    }

    #[test]
    fn contrastive_loss_wraps_vectors() {
        let a = array![1.0, 0.0];
        let p = array![1.0, 0.0];
        let n = array![0.0, 1.0];
        let l = contrastive_loss(&[a.view()], &[p.view()], &[vec![n.view()]], &LossConfig::default()).unwrap();
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-12);
    }

    fn unit(seed: u64, dim: usize) -> Array1<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0));
        let n: f64 = v.dot(&v).sqrt();
        v / n
    }

    #[test]
    fn vector_gradients_match_finite_differences() {
        for form in [LossForm::Infonce, LossForm::Literal] {
            let cfg = LossConfig { temperature: 0.3, form };
            let mut views: Vec<Array1<f64>> = (0..5).map(|s| unit(s, 6)).collect();
            if form == LossForm::Literal {
                // Keep every similarity with the anchor positive.
                for v in views.iter_mut() {
                    *v = (&*v + &array![2.0, 2.0, 2.0, 2.0, 2.0, 2.0]).to_owned();
                    let n = v.dot(v).sqrt();
                    *v /= n;
                }
            }
            let tuples = vec![
                TupleIndex { anchor: 0, positive: 1, negatives: vec![2, 3] },
                TupleIndex { anchor: 1, positive: 0, negatives: vec![4, 2, 3] },
            ];
            let eval = |vs: &[Array1<f64>]| {
                let v: Vec<_> = vs.iter().map(|a| a.view()).collect();
                batch_loss_unchecked(&v, &tuples, &cfg).unwrap()
            };
            let base = eval(&views);
            let h = 1e-6;
            for i in 0..views.len() {
                for k in 0..6 {
                    let mut plus = views.clone();
                    plus[i][k] += h;
                    let mut minus = views.clone();
                    minus[i][k] -= h;
                    let numeric = (eval(&plus).loss - eval(&minus).loss) / (2.0 * h);
                    let analytic = base.grads[i][k];
                    let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                    assert!(rel < 1e-5, "{form:?} view {i} coord {k}: {analytic} vs {numeric}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn monotone_nonnegative_and_permutation_invariant(
            s_pos in -1.0f64..1.0,
            s_neg in proptest::collection::vec(-1.0f64..1.0, 1..6),
            tau in 0.05f64..1.0,
            bump in 0.001f64..0.1,
        ) {
            let base = infonce(s_pos, &s_neg, tau);
            prop_assert!(base >= 0.0);
            prop_assert!(infonce(s_pos + bump, &s_neg, tau) < base);
            for k in 0..s_neg.len() {
                let mut raised = s_neg.clone();
                raised[k] += bump;
                prop_assert!(infonce(s_pos, &raised, tau) > base);
            }
            let mut rev = s_neg.clone();
            rev.reverse();
            prop_assert!((infonce(s_pos, &rev, tau) - base).abs() < 1e-12);
        }
    }
}
