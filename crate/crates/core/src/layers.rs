//! Convolution building blocks on the tape.
//!
//! A 1-D convolution over the rows of a `[positions × channels]` matrix is an
//! [`Tape::unfold`] followed by a matrix product with a `[(K·C_in) × C_out]`
//! weight, so the tap offsets alone decide whether it is causal, anti-causal
//! or centered.

use crate::tensor::{Tape, Var};

/// Taps `-(k-1)δ, …, -δ, 0`: output row `t` sees rows `≤ t` only.
pub fn causal_offsets(kernel: usize, dilation: usize) -> Vec<isize> {
    (0..kernel)
        .map(|i| -(((kernel - 1 - i) * dilation) as isize))
        .collect()
}

/// Taps `0, δ, …, (k-1)δ`: output row `t` sees rows `≥ t` only.
pub fn anticausal_offsets(kernel: usize, dilation: usize) -> Vec<isize> {
    (0..kernel).map(|i| (i * dilation) as isize).collect()
}

/// Centered taps with zero ("same") padding.
pub fn same_offsets(kernel: usize, dilation: usize) -> Vec<isize> {
    let left = (kernel / 2) as isize;
    (0..kernel as isize).map(|i| (i - left) * dilation as isize).collect()
}

/// Convolution with the given taps and optional `[1 × C_out]` bias.
pub fn conv(tape: &mut Tape<'_>, x: Var, weight: Var, bias: Option<Var>, offsets: &[isize]) -> Var {
    let cols = tape.unfold(x, offsets);
    let y = tape.matmul(cols, weight);
    match bias {
        Some(b) => tape.add_bias(y, b),
        None => y,
    }
}
