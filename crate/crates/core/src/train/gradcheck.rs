//! Analytic gradients against central finite differences.

use super::{batch_loss_value, loss_and_grads, Result, TrainError};
use crate::augment::ViewBatch;
use crate::fusion::{joint_forward, LinearTerms};
use crate::loss::LossConfig;
use crate::model::Model;
use crate::tensor::{Mat, Tape};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Denominator floor of [`relative_error`]: below this magnitude both values
/// count as zero and the error is effectively absolute.
const REL_FLOOR: f64 = 1e-7;

/// `|a − b| / max(|a|, |b|, 1e-7)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Five-point central differences of `f` at `x` with step `epsilon`:
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, exact for polynomials
/// up to degree four.
pub fn finite_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(TrainError::NonFinitePerturbation(epsilon));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut at = |k: f64| {
            probe[i] = x[i] + k * epsilon;
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
        probe[i] = x[i];
        if ![p2, p1, m1, m2].iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFinitePerturbation(epsilon));
        }
        out.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * epsilon));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckGroup {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_gradient: f64,
}

/// One structural identity of the Eq-10 head, checked by assembling both
/// sides explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralCheck {
    pub parameter: String,
    pub formula: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub groups: Vec<GradCheckGroup>,
    pub structural: Vec<StructuralCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of the contrastive loss on `batch` with
/// central differences for every parameter array, and checks the Eq-10
/// structural identities on the first view.
pub fn gradcheck(
    model: &Model,
    batch: &ViewBatch,
    loss: &LossConfig,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(TrainError::NonFinitePerturbation(epsilon));
    }
    let (value, analytic) = loss_and_grads(&model.config, &model.params, batch, loss)?;
    let mut params = model.params.clone();
    let mut groups = Vec::new();
    for (g, name) in model.params.names().iter().enumerate() {
        let x: Vec<f64> = model.params.values()[g].iter().copied().collect();
        let shape = model.params.values()[g].dim();
        let numeric = finite_difference(
            |probe| {
                params.values_mut()[g] =
                    Mat::from_shape_vec(shape, probe.to_vec()).expect("same shape");
                batch_loss_value(&model.config, &params, batch, loss)
            },
            &x,
            epsilon,
        )?;
        params.values_mut()[g] = model.params.values()[g].clone();
        let mut group = GradCheckGroup {
            name: name.clone(),
            entries: x.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_abs_gradient: 0.0,
        };
        for (a, n) in analytic[g].iter().zip(&numeric) {
            group.max_rel_error = group.max_rel_error.max(relative_error(*a, *n));
            group.max_abs_error = group.max_abs_error.max((a - n).abs());
            group.max_abs_gradient = group.max_abs_gradient.max(a.abs());
        }
        groups.push(group);
    }
    let structural = structural_checks(model, &batch.views[0])?;
    let max_rel_error = groups
        .iter()
        .map(|g| g.max_rel_error)
        .chain(structural.iter().map(|s| s.max_rel_error))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        loss: value,
        groups,
        structural,
        max_rel_error,
        passed: max_rel_error < tolerance,
    })
}

fn max_rel(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| relative_error(*x, *y))
        .fold(0.0, f64::max)
}

/// Isolates the Eq-10 head on one view's features and checks, with
/// `G = ∂L/∂z` at the pre-sigmoid sum `z`:
/// `∂L/∂W_t = A·Gᵀ`, `∂L/∂W_s = B·Gᵀ`,
/// `∂L/∂U = F_t·(G ∘ VᵀF_s)ᵀ`, `∂L/∂V = F_s·(G ∘ UᵀF_t)ᵀ`,
/// where `A`, `B` are the linear-term inputs.
fn structural_checks(model: &Model, view: &Array2<f64>) -> Result<Vec<StructuralCheck>> {
    let feats = model.features(view.view())?;
    let (lin_t, lin_s) = match model.config.fusion.linear_terms {
        LinearTerms::Initial => (feats.f_t0.clone(), feats.f_s0.clone()),
        LinearTerms::Refined => (feats.f_t.clone(), feats.f_s.clone()),
    };
    let params = &model.params;
    let mut tape = Tape::new(params.values());
    let a = tape.constant(lin_t.clone());
    let b = tape.constant(lin_s.clone());
    let ft = tape.constant(feats.f_t.clone());
    let fs = tape.constant(feats.f_s.clone());
    let (_, joint, flat) = joint_forward(&mut tape, params, a, b, ft, fs)?;
    // A fixed random linear functional of the flat output stands in for L.
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c0ad);
    let seed = Array2::from_shape_simple_fn(tape.shape(flat), || rng.random_range(-1.0..1.0));
    let grads = tape.backward(flat, seed);
    let j = tape.value(joint);
    let g = grads.wrt(joint).expect("joint feeds the output") * &j.mapv(|s| s * (1.0 - s));
    let get = |n: &str| params.get(n).expect("fusion parameter");
    let (u, v) = (get("fusion.U"), get("fusion.V"));
    let pu = u.t().dot(&feats.f_t);
    let pv = v.t().dot(&feats.f_s);
    let expected = [
        ("fusion.W_t", "A·Gᵀ", lin_t.dot(&g.t())),
        ("fusion.W_s", "B·Gᵀ", lin_s.dot(&g.t())),
        ("fusion.U", "F_t·(G∘VᵀF_s)ᵀ", feats.f_t.dot(&(&g * &pv).t())),
        ("fusion.V", "F_s·(G∘UᵀF_t)ᵀ", feats.f_s.dot(&(&g * &pu).t())),
    ];
    Ok(expected
        .into_iter()
        .map(|(name, formula, want)| {
            let idx = params.index(name).expect("fusion parameter");
            let got = grads.params[idx].as_ref().expect("head parameter has a gradient");
            StructuralCheck {
                parameter: name.to_string(),
                formula: formula.to_string(),
                max_rel_error: max_rel(got, &want),
            }
        })
        .collect())
}
