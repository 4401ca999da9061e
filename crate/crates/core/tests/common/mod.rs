#![allow(dead_code)]

use csan::{AttentionMode, MultiHeadParams, Tensor};
use rand::Rng;

/// Membership straight from the set-builder definition, written with signed
/// offsets so it shares nothing with the library's range arithmetic.
pub fn in_scope(mode: AttentionMode, h: usize, i: usize, s: usize, j: usize) -> bool {
    let near = |a: usize, b: usize, span: usize| (a as i64 - b as i64).abs() <= (span / 2) as i64;
    match mode {
        AttentionMode::Global => s == h,
        AttentionMode::Conv1d { window } => s == h && near(i, j, window),
        AttentionMode::Conv2d { window, head_span } => near(h, s, head_span) && near(i, j, window),
    }
}

/// A random even value in `0..=max`.
pub fn even<R: Rng>(rng: &mut R, max: usize) -> usize {
    2 * rng.gen_range(0..=max / 2)
}

/// Global, Conv1D or Conv2D with random even window/span, including extents
/// past the sequence or head count.
pub fn random_mode<R: Rng>(rng: &mut R, len: usize, heads: usize) -> AttentionMode {
    match rng.gen_range(0..3) {
        0 => AttentionMode::Global,
        1 => AttentionMode::Conv1d { window: even(rng, 2 * len + 2) },
        _ => AttentionMode::Conv2d {
            window: even(rng, 2 * len + 2),
            head_span: even(rng, 2 * heads + 2),
        },
    }
}

pub struct Instance {
    pub x: Tensor,
    pub params: MultiHeadParams,
}

pub fn instance<R: Rng>(rng: &mut R, len: usize, d: usize, heads: usize) -> Instance {
    Instance {
        x: Tensor::uniform(&[len, d], 1.0, rng),
        params: MultiHeadParams::random(d, heads, rng).unwrap(),
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
