//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every model operation in this crate is expressed against a [`Tape`]. A tape
//! borrows the parameter arrays it reads, records each intermediate value and
//! the operation that produced it, and can then propagate a seed gradient from
//! any recorded value back to every parameter and intermediate node.
//!
//! Matrices are row-major `[positions × channels]` throughout.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    /// Borrowed parameter array, by index into the tape's parameter slice.
    Param(usize),
    /// Recorded intermediate value.
    Node(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    TransMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Unfold { x: Var, offsets: Vec<isize> },
    Tanh(Var),
    Sigmoid(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Normalize { x: Var, norm: f64 },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
}

/// Gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    pub params: Vec<Option<Mat>>,
    nodes: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Mat> {
        match var {
            Var::Param(i) => self.params[i].as_ref(),
            Var::Node(i) => self.nodes[i].as_ref(),
        }
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Valid output-row range `[lo, hi)` for reading input row `t + offset`.
fn shifted_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Row window `[start, end)` of output `i` when adaptively pooling `len` rows
/// into `out` rows.
pub fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end.max(start + 1).min(len))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        match v {
            Var::Param(i) => &self.params[i],
            Var::Node(i) => &self.nodes[i].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Shapes of every recorded intermediate, in recording order.
    pub fn node_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().map(|n| n.value.dim())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var::Node(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index out of range");
        Var::Param(index)
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `aᵀ · b`
    pub fn trans_matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t().dot(self.value(b));
        self.push(v, Op::TransMatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `[1 × c]` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddBias(a, bias))
    }

    /// Gathers shifted copies of `x` side by side: output row `t`, block `k`
    /// holds input row `t + offsets[k]`, or zeros when that row is outside the
    /// input. Multiplying the result by a `[(K·C) × C_out]` matrix is a 1-D
    /// convolution with arbitrary tap offsets.
    pub fn unfold(&mut self, x: Var, offsets: &[isize]) -> Var {
        let xv = self.value(x);
        let (len, ch) = xv.dim();
        let mut cols = Mat::zeros((len, ch * offsets.len()));
        for (k, &off) in offsets.iter().enumerate() {
            let (lo, hi) = shifted_range(len, off);
            if lo < hi {
                let src_lo = (lo as isize + off) as usize;
                let src_hi = (hi as isize + off) as usize;
                cols.slice_mut(s![lo..hi, k * ch..(k + 1) * ch])
                    .assign(&xv.slice(s![src_lo..src_hi, ..]));
            }
        }
        self.push(
            cols,
            Op::Unfold {
                x,
                offsets: offsets.to_vec(),
            },
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Adaptive max-pooling along rows to exactly `out` rows.
    pub fn max_pool(&mut self, x: Var, out: usize) -> Var {
        let xv = self.value(x);
        let (len, ch) = xv.dim();
        let mut v = Mat::zeros((out, ch));
        let mut argmax = vec![0usize; out * ch];
        for i in 0..out {
            let (start, end) = pool_window(i, len, out);
            for c in 0..ch {
                let mut best = start;
                let mut best_v = xv[[start, c]];
                for r in start + 1..end {
                    if xv[[r, c]] > best_v {
                        best_v = xv[[r, c]];
                        best = r;
                    }
                }
                v[[i, c]] = best_v;
                argmax[i * ch + c] = best;
            }
        }
        self.push(v, Op::MaxPool { x, argmax })
    }

    /// Divides by the Frobenius norm. Callers must ensure the norm is nonzero.
    pub fn normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norm = xv.iter().map(|a| a * a).sum::<f64>().sqrt();
        let v = xv / norm;
        self.push(v, Op::Normalize { x, norm })
    }

    /// Row-major reinterpretation as `[rows × cols]`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        let flat: Vec<f64> = xv.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape(x))
    }

    /// Propagates `seed` (the gradient of some scalar with respect to `out`)
    /// back through the tape.
    pub fn backward(&self, out: Var, seed: Mat) -> Gradients {
        assert_eq!(seed.dim(), self.shape(out), "seed shape mismatch");
        let mut grads = Gradients {
            params: vec![None; self.params.len()],
            nodes: vec![None; self.nodes.len()],
        };
        let last = match out {
            Var::Param(i) => {
                grads.params[i] = Some(seed);
                return grads;
            }
            Var::Node(i) => {
                grads.nodes[i] = Some(seed);
                i
            }
        };

        for idx in (0..=last).rev() {
            let Some(g) = grads.nodes[idx].clone() else {
                continue;
            };
            let node = &self.nodes[idx];
            let send = |v: Var, delta: Mat, grads: &mut Gradients| match v {
                Var::Param(i) => accumulate(&mut grads.params[i], delta),
                Var::Node(i) => accumulate(&mut grads.nodes[i], delta),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::TransMatMul(a, b) => {
                    let ga = self.value(*b).dot(&g.t());
                    let gb = self.value(*a).dot(&g);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::AddBias(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*bias, gb, &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Unfold { x, offsets } => {
                    let (len, ch) = self.shape(*x);
                    let mut gx = Mat::zeros((len, ch));
                    for (k, &off) in offsets.iter().enumerate() {
                        let (lo, hi) = shifted_range(len, off);
                        if lo < hi {
                            let src_lo = (lo as isize + off) as usize;
                            let src_hi = (hi as isize + off) as usize;
                            let mut dst = gx.slice_mut(s![src_lo..src_hi, ..]);
                            dst += &g.slice(s![lo..hi, k * ch..(k + 1) * ch]);
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gi, &y| *gi *= 1.0 - y * y);
                    send(*a, ga, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gi, &y| *gi *= y * (1.0 - y));
                    send(*a, ga, &mut grads);
                }
                Op::MaxPool { x, argmax } => {
                    let (len, ch) = self.shape(*x);
                    let mut gx = Mat::zeros((len, ch));
                    let out = g.nrows();
                    for i in 0..out {
                        for c in 0..ch {
                            gx[[argmax[i * ch + c], c]] += g[[i, c]];
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::Normalize { x, norm } => {
                    let y = &node.value;
                    let dot: f64 = Zip::from(y).and(&g).fold(0.0, |acc, &a, &b| acc + a * b);
                    let gx = (&g - &(y * dot)) / *norm;
                    send(*x, gx, &mut grads);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.shape(*x);
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let gx = Mat::from_shape_vec((r, c), flat).expect("reshape size mismatch");
                    send(*x, gx, &mut grads);
                }
            }
        }
        grads
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `loss(value)` with respect to every entry of one
    /// input matrix.
    fn numeric_grad(input: &Mat, loss: impl Fn(&Mat) -> f64) -> Mat {
        let eps = 1e-6;
        let mut g = Mat::zeros(input.dim());
        let mut probe = input.clone();
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            probe[[r, c]] = input[[r, c]] + eps;
            let up = loss(&probe);
            probe[[r, c]] = input[[r, c]] - eps;
            let down = loss(&probe);
            probe[[r, c]] = input[[r, c]];
            g[[r, c]] = (up - down) / (2.0 * eps);
        }
        g
    }

    fn weighted_sum(m: &Mat) -> f64 {
        m.iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + 0.1 * i as f64))
            .sum()
    }

    fn weights_like(m: &Mat) -> Mat {
        Mat::from_shape_fn(m.dim(), |(r, c)| 1.0 + 0.1 * (r * m.ncols() + c) as f64)
    }

    fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn pool_windows_cover_all_rows() {
        for len in 1..40 {
            for out in 1..12 {
                let mut seen = vec![false; len];
                for i in 0..out {
                    let (a, b) = pool_window(i, len, out);
                    assert!(a < b && b <= len);
                    seen[a..b].iter_mut().for_each(|s| *s = true);
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn unfold_gathers_shifted_rows() {
        let x = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]];
        let params = [];
        let mut tape = Tape::new(&params);
        let xv = tape.constant(x);
        let u = tape.unfold(xv, &[-1, 0, 2]);
        let expected = array![
            [0.0, 0.0, 1.0, 10.0, 3.0, 30.0],
            [1.0, 10.0, 2.0, 20.0, 0.0, 0.0],
            [2.0, 20.0, 3.0, 30.0, 0.0, 0.0],
        ];
        assert_eq!(tape.value(u), &expected);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let a = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6], [0.7, 0.2, 0.05], [-0.3, 0.9, 0.1]];
        let w = array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.25], [0.1, 0.1], [0.3, -0.2], [0.05, 0.6], [0.2, 0.2], [-0.4, 0.1], [0.3, 0.3]];
        let bias = array![[0.1, -0.05]];
        fn forward(params: &[Mat]) -> (f64, Tape<'_>, Var) {
            let mut tape = Tape::new(params);
            let x = tape.param(0);
            let u = tape.unfold(x, &[-1, 0, 1]);
            let c = tape.matmul(u, tape.param(1));
            let c = tape.add_bias(c, tape.param(2));
            let h = tape.tanh(c);
            let p = tape.max_pool(h, 3);
            let q = tape.trans_matmul(p, p);
            let r = tape.mul(q, q);
            let s = tape.sigmoid(r);
            let n = tape.normalize(s);
            let z = tape.reshape(n, 1, 4);
            (weighted_sum(tape.value(z)), tape, z)
        }
        let params = vec![a.clone(), w.clone(), bias.clone()];
        let (_, tape, z) = forward(&params);
        let seed = weights_like(tape.value(z));
        let grads = tape.backward(z, seed);
        for which in 0..3 {
            let numeric = numeric_grad(&params[which], |m| {
                let mut p = params.clone();
                p[which] = m.clone();
                forward(&p).0
            });
            let analytic = grads.params[which].as_ref().unwrap();
            assert!(
                max_abs_diff(analytic, &numeric) < 1e-8,
                "param {which}: {analytic:?} vs {numeric:?}"
            );
        }
    }

    #[test]
    fn shared_inputs_accumulate_gradients() {
        let params = vec![array![[2.0, 3.0]]];
        let mut tape = Tape::new(&params);
        let x = tape.param(0);
        let y = tape.mul(x, x);
        let z = tape.add(y, x);
        let grads = tape.backward(z, array![[1.0, 1.0]]);
        assert_eq!(grads.params[0].as_ref().unwrap(), &array![[5.0, 7.0]]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
