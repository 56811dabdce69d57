//! Bilinear temporal-spectral fusion.
//!
//! Temporal features `F_t [m × d]` and spectral features `F_s [n × d]` are
//! fused by low-rank bilinear pooling `(UᵀF_t) ∘ (VᵀF_s)`, squeezed back into
//! refined temporal and spectral features by the S2T and T2S aggregators,
//! and pooled again, for a fixed number of loops. The joint representation
//! combines the initial features linearly with the final bilinear term.

use crate::layers::{anticausal_offsets, causal_offsets, conv, same_offsets};
use crate::model::{Init, ModelError, ParamSpec, ParamStore, Result};
use crate::tensor::{Tape, Var};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Nonlinearity inside the S2T and T2S aggregators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

/// Which temporal and spectral features enter the linear terms of the joint
/// representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearTerms {
    /// Encoder outputs before any fusion loop.
    #[default]
    Initial,
    /// Loop-refined features.
    Refined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Rank of the factorized interaction matrix.
    pub l: usize,
    pub loops: usize,
    /// One S2T/T2S weight set reused by every loop, or one per loop.
    pub shared_loop_weights: bool,
    pub kernel: usize,
    pub activation: Activation,
    pub linear_terms: LinearTerms,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            l: 32,
            loops: 3,
            shared_loop_weights: true,
            kernel: 3,
            activation: Activation::Tanh,
            linear_terms: LinearTerms::Initial,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, m: usize, n: usize, d: usize) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.loops < 1 {
            return bad("fusion loops must be >= 1".into());
        }
        if self.kernel < 1 {
            return bad("fusion kernel must be >= 1".into());
        }
        if self.l < 1 || self.l > (m * d).min(n * d) {
            return bad(format!(
                "rank l={} must lie in [1, min(m·d, n·d)] = [1, {}]",
                self.l,
                (m * d).min(n * d)
            ));
        }
        Ok(())
    }

    fn weight_sets(&self) -> usize {
        if self.shared_loop_weights {
            1
        } else {
            self.loops
        }
    }

    /// Parameter name prefix of aggregator `which` ("s2t" or "t2s") in loop `k`.
    pub fn aggregator_prefix(&self, which: &str, k: usize) -> String {
        if self.shared_loop_weights {
            format!("fusion.{which}")
        } else {
            format!("fusion.{which}.loop{k}")
        }
    }

    /// Parameter layout for features `F_t [m × d]` and `F_s [n × d]`.
    pub fn param_specs(&self, m: usize, n: usize, d: usize) -> Vec<ParamSpec> {
        let l = self.l;
        let kd = self.kernel * d;
        let mut specs = vec![
            ParamSpec::new("fusion.U", m, l, Init::Scaled { fan_in: m }),
            ParamSpec::new("fusion.V", n, l, Init::Scaled { fan_in: n }),
            ParamSpec::new("fusion.W_t", m, l, Init::Scaled { fan_in: m }),
            ParamSpec::new("fusion.W_s", n, l, Init::Scaled { fan_in: n }),
        ];
        for (which, rows) in [("s2t", m), ("t2s", n)] {
            for k in 0..self.weight_sets() {
                let p = self.aggregator_prefix(which, k);
                specs.push(ParamSpec::new(format!("{p}.conv.w"), kd, d, Init::Scaled { fan_in: kd }));
                specs.push(ParamSpec::new(format!("{p}.conv.b"), 1, d, Init::Zeros));
                specs.push(ParamSpec::new(format!("{p}.proj"), rows, l, Init::Scaled { fan_in: l }));
                specs.push(ParamSpec::new(format!("{p}.left.w"), kd, d, Init::Scaled { fan_in: 2 * kd }));
                specs.push(ParamSpec::new(format!("{p}.right.w"), kd, d, Init::Scaled { fan_in: 2 * kd }));
                specs.push(ParamSpec::new(format!("{p}.bicausal.b"), 1, d, Init::Zeros));
            }
        }
        specs
    }
}

/// Fusion configuration with its parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub params: ParamStore,
}

impl FusionParams {
    pub fn init(config: FusionConfig, m: usize, n: usize, d: usize, seed: u64) -> Result<Self> {
        config.validate(m, n, d)?;
        let params = ParamStore::from_specs(&config.param_specs(m, n, d), seed);
        Ok(Self { config, params })
    }

    /// The `fusion.*` arrays of a full model store.
    pub fn from_store(config: FusionConfig, store: &ParamStore) -> Self {
        Self {
            config,
            params: store.with_prefix("fusion."),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
}

/// One step of the fusion loop, as recorded by the trace hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStep {
    Pool { iteration: usize },
    S2T { iteration: usize },
    T2S { iteration: usize },
}

/// Fused feature of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearFeature {
    /// `[d × d]` full bilinear pooling, computed only on request.
    pub full: Option<Array2<f64>>,
    /// `[l × d]` low-rank bilinear pooling of the refined features.
    pub lowrank: Array2<f64>,
    /// `[l × d]` sigmoid joint representation.
    pub joint: Array2<f64>,
    /// Row-major flattening of `joint`, scaled to unit norm.
    pub flat: Array1<f64>,
}

fn shape_err(what: &str, got: (usize, usize), want: (usize, usize)) -> ModelError {
    ModelError::ShapeMismatch(format!("{what}: got {got:?}, expected {want:?}"))
}

/// `Σ_i Σ_j F_t(i) ⊗ F_s(j)`, the sum over all time-frequency pairs of their
/// outer products.
pub fn bilinear_pool_full(f_t: ArrayView2<'_, f64>, f_s: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if f_t.ncols() != f_s.ncols() {
        return Err(shape_err("F_s", f_s.dim(), (f_s.nrows(), f_t.ncols())));
    }
    let d = f_t.ncols();
    let mut out = Array2::zeros((d, d));
    for a in f_t.rows() {
        for b in f_s.rows() {
            for p in 0..d {
                for q in 0..d {
                    out[[p, q]] += a[p] * b[q];
                }
            }
        }
    }
    Ok(out)
}

/// `(UᵀF_t) ∘ (VᵀF_s)`, shape `[l × d]`.
pub fn bilinear_pool_lowrank(
    f_t: ArrayView2<'_, f64>,
    f_s: ArrayView2<'_, f64>,
    u: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let (m, d) = f_t.dim();
    let (n, l) = (f_s.nrows(), u.ncols());
    if f_s.ncols() != d {
        return Err(shape_err("F_s", f_s.dim(), (n, d)));
    }
    if u.nrows() != m {
        return Err(shape_err("U", u.dim(), (m, l)));
    }
    if v.dim() != (n, l) {
        return Err(shape_err("V", v.dim(), (n, l)));
    }
    Ok(u.t().dot(&f_t) * v.t().dot(&f_s))
}

fn activate(tape: &mut Tape<'_>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Identity => x,
    }
}

fn check_shape(tape: &Tape<'_>, v: Var, want: (usize, usize), what: &str) -> Result<()> {
    let got = tape.shape(v);
    if got != want {
        return Err(shape_err(what, got, want));
    }
    Ok(())
}

/// Low-rank pooling on the tape.
pub fn lowrank_forward(tape: &mut Tape<'_>, store: &ParamStore, f_t: Var, f_s: Var) -> Result<Var> {
    let u = store.var(tape, "fusion.U")?;
    let v = store.var(tape, "fusion.V")?;
    let (m, d) = tape.shape(f_t);
    let l = tape.shape(u).1;
    check_shape(tape, u, (m, l), "fusion.U")?;
    let n = tape.shape(f_s).0;
    check_shape(tape, f_s, (n, d), "F_s")?;
    check_shape(tape, v, (n, l), "fusion.V")?;
    let pt = tape.trans_matmul(u, f_t);
    let ps = tape.trans_matmul(v, f_s);
    Ok(tape.mul(pt, ps))
}

struct Aggregator {
    conv_w: Var,
    conv_b: Var,
    proj: Var,
    left_w: Var,
    right_w: Var,
    bicausal_b: Var,
}

impl Aggregator {
    fn lookup(tape: &Tape<'_>, store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| store.var(tape, &format!("{prefix}.{s}"));
        Ok(Self {
            conv_w: get("conv.w")?,
            conv_b: get("conv.b")?,
            proj: get("proj")?,
            left_w: get("left.w")?,
            right_w: get("right.w")?,
            bicausal_b: get("bicausal.b")?,
        })
    }

    fn check(&self, tape: &Tape<'_>, b: Var, kernel: usize, prefix: &str) -> Result<()> {
        let (l, d) = tape.shape(b);
        let rows = tape.shape(self.proj).0;
        check_shape(tape, self.proj, (rows, l), &format!("{prefix}.proj"))?;
        for (w, name) in [(self.conv_w, "conv.w"), (self.left_w, "left.w"), (self.right_w, "right.w")] {
            check_shape(tape, w, (kernel * d, d), &format!("{prefix}.{name}"))?;
        }
        Ok(())
    }

    fn conv_same(&self, tape: &mut Tape<'_>, x: Var, kernel: usize) -> Var {
        conv(tape, x, self.conv_w, Some(self.conv_b), &same_offsets(kernel, 1))
    }

    /// Left-causal plus right-causal convolution with one shared bias.
    fn bicausal(&self, tape: &mut Tape<'_>, x: Var, kernel: usize) -> Var {
        let left = conv(tape, x, self.left_w, None, &causal_offsets(kernel, 1));
        let right = conv(tape, x, self.right_w, None, &anticausal_offsets(kernel, 1));
        let sum = tape.add(left, right);
        tape.add_bias(sum, self.bicausal_b)
    }
}

/// S2T on the tape: `φ(BiCausal(P_m · φ(Conv(B))))`, `[l × d] → [m × d]`.
pub fn s2t_forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    config: &FusionConfig,
    iteration: usize,
    b: Var,
) -> Result<Var> {
    let prefix = config.aggregator_prefix("s2t", iteration);
    let agg = Aggregator::lookup(tape, store, &prefix)?;
    agg.check(tape, b, config.kernel, &prefix)?;
    let c = agg.conv_same(tape, b, config.kernel);
    let c = activate(tape, c, config.activation);
    let p = tape.matmul(agg.proj, c);
    let out = agg.bicausal(tape, p, config.kernel);
    Ok(activate(tape, out, config.activation))
}

/// T2S on the tape: `φ(Conv(P_n · φ(BiCausal(B))))`, `[l × d] → [n × d]`.
pub fn t2s_forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    config: &FusionConfig,
    iteration: usize,
    b: Var,
) -> Result<Var> {
    let prefix = config.aggregator_prefix("t2s", iteration);
    let agg = Aggregator::lookup(tape, store, &prefix)?;
    agg.check(tape, b, config.kernel, &prefix)?;
    let c = agg.bicausal(tape, b, config.kernel);
    let c = activate(tape, c, config.activation);
    let p = tape.matmul(agg.proj, c);
    let out = agg.conv_same(tape, p, config.kernel);
    Ok(activate(tape, out, config.activation))
}

/// Handles of the fusion outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    /// Refined temporal feature (last S2T output), `[m × d]`.
    pub f_t: Var,
    /// Refined spectral feature (last T2S output), `[n × d]`.
    pub f_s: Var,
    /// Last low-rank pooling inside the loop, `[l × d]`.
    pub loop_bilinear: Var,
    /// Low-rank pooling of the refined features, `[l × d]`.
    pub bilinear: Var,
    pub joint: Var,
    /// `[1 × l·d]`, unit norm.
    pub flat: Var,
}

/// The fusion loop on the tape; returns `(F_t, F_s, F_bilinear)`.
pub fn iterate_forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    config: &FusionConfig,
    f_t0: Var,
    f_s0: Var,
    mut trace: Option<&mut Vec<FusionStep>>,
) -> Result<(Var, Var, Var)> {
    if config.loops < 1 {
        return Err(ModelError::InvalidConfig("fusion loops must be >= 1".into()));
    }
    let (mut f_t, mut f_s) = (f_t0, f_s0);
    let mut bilinear = None;
    for k in 0..config.loops {
        let w = if config.shared_loop_weights { 0 } else { k };
        let b = lowrank_forward(tape, store, f_t, f_s)?;
        let new_t = s2t_forward(tape, store, config, w, b)?;
        let new_s = t2s_forward(tape, store, config, w, b)?;
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(FusionStep::Pool { iteration: k });
            trace.push(FusionStep::S2T { iteration: k });
            trace.push(FusionStep::T2S { iteration: k });
        }
        f_t = new_t;
        f_s = new_s;
        bilinear = Some(b);
    }
    Ok((f_t, f_s, bilinear.expect("at least one loop")))
}

/// Eq-10 head on the tape: `σ(W_tᵀA + W_sᵀB + (UᵀF_t)∘(VᵀF_s))` and its
/// normalized flattening. Returns `(bilinear, joint, flat)`.
pub fn joint_forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    lin_t: Var,
    lin_s: Var,
    f_t: Var,
    f_s: Var,
) -> Result<(Var, Var, Var)> {
    let w_t = store.var(tape, "fusion.W_t")?;
    let w_s = store.var(tape, "fusion.W_s")?;
    let bilinear = lowrank_forward(tape, store, f_t, f_s)?;
    let (l, d) = tape.shape(bilinear);
    check_shape(tape, w_t, (tape.shape(lin_t).0, l), "fusion.W_t")?;
    check_shape(tape, w_s, (tape.shape(lin_s).0, l), "fusion.W_s")?;
    check_shape(tape, lin_t, (tape.shape(lin_t).0, d), "temporal linear term")?;
    check_shape(tape, lin_s, (tape.shape(lin_s).0, d), "spectral linear term")?;
    let a = tape.trans_matmul(w_t, lin_t);
    let b = tape.trans_matmul(w_s, lin_s);
    let sum = tape.add(a, b);
    let z = tape.add(sum, bilinear);
    let joint = tape.sigmoid(z);
    let row = tape.reshape(joint, 1, l * d);
    if tape.value(row).iter().all(|&v| v == 0.0) {
        return Err(ModelError::ZeroNorm);
    }
    let flat = tape.normalize(row);
    Ok((bilinear, joint, flat))
}

/// The loop followed by the joint head.
pub fn fusion_forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    config: &FusionConfig,
    f_t0: Var,
    f_s0: Var,
    trace: Option<&mut Vec<FusionStep>>,
) -> Result<FusionVars> {
    let (f_t, f_s, loop_bilinear) = iterate_forward(tape, store, config, f_t0, f_s0, trace)?;
    let (lin_t, lin_s) = match config.linear_terms {
        LinearTerms::Initial => (f_t0, f_s0),
        LinearTerms::Refined => (f_t, f_s),
    };
    let (bilinear, joint, flat) = joint_forward(tape, store, lin_t, lin_s, f_t, f_s)?;
    Ok(FusionVars {
        f_t,
        f_s,
        loop_bilinear,
        bilinear,
        joint,
        flat,
    })
}

fn with_tape<R>(
    params: &FusionParams,
    inputs: &[ArrayView2<'_, f64>],
    body: impl FnOnce(&mut Tape<'_>, &[Var]) -> Result<Vec<Var>>,
    finish: impl FnOnce(&Tape<'_>, &[Var]) -> R,
) -> Result<R> {
    let mut tape = Tape::new(params.params.values());
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.to_owned())).collect();
    let outs = body(&mut tape, &vars)?;
    Ok(finish(&tape, &outs))
}

/// S2T with the weights of loop `iteration`.
pub fn s2t(b: ArrayView2<'_, f64>, params: &FusionParams, iteration: usize) -> Result<Array2<f64>> {
    with_tape(
        params,
        &[b],
        |tape, v| Ok(vec![s2t_forward(tape, &params.params, &params.config, iteration, v[0])?]),
        |tape, o| tape.value(o[0]).clone(),
    )
}

/// T2S with the weights of loop `iteration`.
pub fn t2s(b: ArrayView2<'_, f64>, params: &FusionParams, iteration: usize) -> Result<Array2<f64>> {
    with_tape(
        params,
        &[b],
        |tape, v| Ok(vec![t2s_forward(tape, &params.params, &params.config, iteration, v[0])?]),
        |tape, o| tape.value(o[0]).clone(),
    )
}

/// Runs the loop and returns `(F_t, F_s, F_bilinear)`.
pub fn iterate_fusion(
    f_t0: ArrayView2<'_, f64>,
    f_s0: ArrayView2<'_, f64>,
    params: &FusionParams,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    iterate_fusion_traced(f_t0, f_s0, params, None)
}

/// [`iterate_fusion`] that also records every pooling and aggregation call.
pub fn iterate_fusion_traced(
    f_t0: ArrayView2<'_, f64>,
    f_s0: ArrayView2<'_, f64>,
    params: &FusionParams,
    trace: Option<&mut Vec<FusionStep>>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    with_tape(
        params,
        &[f_t0, f_s0],
        |tape, v| {
            let (a, b, c) = iterate_forward(tape, &params.params, &params.config, v[0], v[1], trace)?;
            Ok(vec![a, b, c])
        },
        |tape, o| {
            (
                tape.value(o[0]).clone(),
                tape.value(o[1]).clone(),
                tape.value(o[2]).clone(),
            )
        },
    )
}

/// Eq-10 joint representation. `f_t0`/`f_s0` feed the linear terms and the
/// refined `f_t`/`f_s` feed the bilinear term.
pub fn joint_feature(
    f_t0: ArrayView2<'_, f64>,
    f_s0: ArrayView2<'_, f64>,
    f_t: ArrayView2<'_, f64>,
    f_s: ArrayView2<'_, f64>,
    params: &FusionParams,
    with_full: bool,
) -> Result<BilinearFeature> {
    let full = if with_full {
        Some(bilinear_pool_full(f_t, f_s)?)
    } else {
        None
    };
    with_tape(
        params,
        &[f_t0, f_s0, f_t, f_s],
        |tape, v| {
            let (b, j, f) = joint_forward(tape, &params.params, v[0], v[1], v[2], v[3])?;
            Ok(vec![b, j, f])
        },
        |tape, o| BilinearFeature {
            full,
            lowrank: tape.value(o[0]).clone(),
            joint: tape.value(o[1]).clone(),
            flat: tape.value(o[2]).row(0).to_owned(),
        },
    )
}
