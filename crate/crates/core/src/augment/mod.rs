//! Instance-level contrastive tuples and baseline augmentation policies.
//!
//! Anchors and positives are two independently masked copies of the same
//! whole series. Negatives come from the other variables of the instance, or
//! from other instances of the batch when the data is univariate.

mod policies;

pub use policies::{apply_policy, AugmentPolicy, PolicyKind};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("dropout rate {0} outside [0, 1)")]
    RateOutOfRange(f64),
    #[error("need {needed} negatives but only {available} are available")]
    NotEnoughNegatives { needed: usize, available: usize },
    #[error("bad policy parameters: {0}")]
    BadPolicyParams(String),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// Zeroes each scalar independently with probability `rate` and scales the
/// survivors by `1 / (1 - rate)`.
pub fn dropout_augment(x: ArrayView2<'_, f64>, rate: f64, seed: u64) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AugmentError::RateOutOfRange(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    Ok(x.mapv(|v| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            v * keep
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePolicy {
    /// Other variables of the same instance; each view is one variable.
    OtherVariables,
    /// Other instances of the batch; each view holds all variables.
    #[default]
    OtherInstances,
}

/// Where a view came from: batch position and, for single-variable views,
/// the variable index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceId {
    pub instance: usize,
    pub variable: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTuple {
    pub anchor: Array2<f64>,
    pub positive: Array2<f64>,
    pub negatives: Vec<Array2<f64>>,
    pub source: SourceId,
    pub negative_sources: Vec<SourceId>,
}

/// Builds one tuple for `batch[index]`. `policy` generates the anchor and
/// positive views (and augments the negatives the same way).
#[allow(clippy::too_many_arguments)]
pub fn make_tuple(
    batch: &[ArrayView2<'_, f64>],
    index: usize,
    anchor_variable: usize,
    view_policy: &PolicyKind,
    n_negatives: usize,
    negatives: NegativePolicy,
    seed: u64,
) -> Result<ContrastiveTuple> {
    let x = batch[index];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = |series: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng| {
        apply_policy(series, &AugmentPolicy::new(view_policy.clone(), rng.random())?)
    };
    match negatives {
        NegativePolicy::OtherVariables => {
            let d = x.nrows();
            if anchor_variable >= d {
                return Err(AugmentError::BadPolicyParams(format!(
                    "anchor variable {anchor_variable} out of range for D={d}"
                )));
            }
            let available = d - 1;
            if available == 0 || n_negatives > available {
                return Err(AugmentError::NotEnoughNegatives {
                    needed: n_negatives.max(1),
                    available,
                });
            }
            let single = |v: usize| x.select(Axis(0), &[v]);
            let anchor_series = single(anchor_variable);
            let anchor = view(anchor_series.view(), &mut rng)?;
            let positive = view(anchor_series.view(), &mut rng)?;
            let others: Vec<usize> = (0..d).filter(|&v| v != anchor_variable).collect();
            let picked = sample(&mut rng, available, n_negatives).into_vec();
            let mut negs = Vec::with_capacity(n_negatives);
            let mut sources = Vec::with_capacity(n_negatives);
            for p in picked {
                let v = others[p];
                negs.push(view(single(v).view(), &mut rng)?);
                sources.push(SourceId {
                    instance: index,
                    variable: Some(v),
                });
            }
            Ok(ContrastiveTuple {
                anchor,
                positive,
                negatives: negs,
                source: SourceId {
                    instance: index,
                    variable: Some(anchor_variable),
                },
                negative_sources: sources,
            })
        }
        NegativePolicy::OtherInstances => {
            let available = batch.len().saturating_sub(1);
            if available == 0 || n_negatives > available {
                return Err(AugmentError::NotEnoughNegatives {
                    needed: n_negatives.max(1),
                    available,
                });
            }
            let anchor = view(x, &mut rng)?;
            let positive = view(x, &mut rng)?;
            let others: Vec<usize> = (0..batch.len()).filter(|&i| i != index).collect();
            let picked = sample(&mut rng, available, n_negatives).into_vec();
            let mut negs = Vec::with_capacity(n_negatives);
            let mut sources = Vec::with_capacity(n_negatives);
            for p in picked {
                let j = others[p];
                negs.push(view(batch[j], &mut rng)?);
                sources.push(SourceId {
                    instance: j,
                    variable: None,
                });
            }
            Ok(ContrastiveTuple {
                anchor,
                positive,
                negatives: negs,
                source: SourceId {
                    instance: index,
                    variable: None,
                },
                negative_sources: sources,
            })
        }
    }
}

/// Indices into [`ViewBatch::views`] forming one anchor's contrastive terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Deduplicated views of a training batch plus the tuples over them.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<Array2<f64>>,
    pub tuples: Vec<TupleIndex>,
}

/// Builds the views for one optimization step.
///
/// With [`NegativePolicy::OtherInstances`] the positive view of each instance
/// doubles as a negative for the others, so a batch of `B` instances costs
/// `2B` encodings. `n_negatives` is capped at `B - 1`.
pub fn make_batch(
    batch: &[ArrayView2<'_, f64>],
    view_policy: &PolicyKind,
    n_negatives: usize,
    negatives: NegativePolicy,
    seed: u64,
) -> Result<ViewBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::new();
    let mut tuples = Vec::new();
    match negatives {
        NegativePolicy::OtherVariables => {
            for (i, x) in batch.iter().enumerate() {
                let d = x.nrows();
                let k = n_negatives.min(d.saturating_sub(1)).max(1);
                let var = rng.random_range(0..d);
                let tuple = make_tuple(batch, i, var, view_policy, k, negatives, rng.random())?;
                let base = views.len();
                let n = tuple.negatives.len();
                views.push(tuple.anchor);
                views.push(tuple.positive);
                views.extend(tuple.negatives);
                tuples.push(TupleIndex {
                    anchor: base,
                    positive: base + 1,
                    negatives: (base + 2..base + 2 + n).collect(),
                });
            }
        }
        NegativePolicy::OtherInstances => {
            let b = batch.len();
            if b < 2 {
                return Err(AugmentError::NotEnoughNegatives {
                    needed: 1,
                    available: 0,
                });
            }
            let k = n_negatives.clamp(1, b - 1);
            for x in batch {
                let policy = AugmentPolicy::new(view_policy.clone(), rng.random())?;
                views.push(apply_policy(*x, &policy)?);
            }
            for x in batch {
                let policy = AugmentPolicy::new(view_policy.clone(), rng.random())?;
                views.push(apply_policy(*x, &policy)?);
            }
            for i in 0..b {
                let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
                let negs = if k == b - 1 {
                    others.iter().map(|&j| b + j).collect()
                } else {
                    let mut picked = sample(&mut rng, b - 1, k).into_vec();
                    picked.sort_unstable();
                    picked.into_iter().map(|p| b + others[p]).collect()
                };
                tuples.push(TupleIndex {
                    anchor: i,
                    positive: b + i,
                    negatives: negs,
                });
            }
        }
    }
    Ok(ViewBatch { views, tuples })
}
