//! Brute-force reference implementations.
//!
//! Everything here is written with explicit scalar loops over raw indices and
//! deliberately calls none of the kernels in `attention`, `encoder` or the
//! tensor ops it is used to check. Speed is irrelevant.

use crate::attention::{AttentionMode, MultiHeadParams};
use crate::encoder::{EncoderConfig, EncoderParams, LayerParams};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Deviation summary between a candidate and a reference tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub max_abs: f64,
    pub max_rel: f64,
    /// Multi-index of the element with the largest absolute deviation.
    pub worst: Vec<usize>,
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (slot, &extent) in idx.iter_mut().zip(shape).rev() {
        *slot = flat % extent;
        flat /= extent;
    }
    idx
}

/// `max |a - b|`, `max |a - b| / (|b| + 1e-12)` and where the former occurs.
pub fn compare(a: &Tensor, b: &Tensor) -> Result<OracleReport> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch("compare", a.shape(), b.shape()));
    }
    let mut max_abs = 0.0;
    let mut max_rel = 0.0;
    let mut worst = 0;
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let d = (x - y).abs();
        if d > max_abs {
            max_abs = d;
            worst = i;
        }
        let r = d / (y.abs() + 1e-12);
        if r > max_rel {
            max_rel = r;
        }
    }
    Ok(OracleReport {
        max_abs,
        max_rel,
        worst: unravel(worst, a.shape()),
    })
}

/// Central differences `(f(x + εe) − f(x − εe)) / 2ε` for every coordinate.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_diff needs a positive step");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Tensor-level relative error: `max|a − n| / max(max|a|, max|n|)`.
///
/// Normalizing by the tensor's largest magnitude keeps coordinates whose true
/// gradient is ~0 from dominating through finite-difference noise.
pub fn gradient_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient_error shapes");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k, "naive_matmul inner extents");
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.at(&[i, t]) * b.at(&[t, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Whether key slot `(s, j)` belongs to query `(h, i)`'s scope, straight from the set-builder form.
fn in_scope(mode: AttentionMode, h: usize, i: usize, s: usize, j: usize) -> bool {
    let within = |centre: usize, other: usize, span: usize| {
        // other ∈ {centre − span/2, …, centre + span/2}
        let c = centre as i64;
        let o = other as i64;
        let half = (span / 2) as i64;
        o >= c - half && o <= c + half
    };
    match mode {
        AttentionMode::Global => s == h,
        AttentionMode::Conv1d { window } => s == h && within(i, j, window),
        AttentionMode::Conv2d { window, head_span } => within(h, s, head_span) && within(i, j, window),
    }
}

/// Loop-based multi-head attention `[I, d] → [I, d]`.
pub fn ref_attend(x: &Tensor, params: &MultiHeadParams, mode: AttentionMode) -> Result<Tensor> {
    let d = params.w_q.shape()[0];
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(Error::mismatch("ref_attend", x.shape(), params.w_q.shape()));
    }
    let heads = params.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid("heads must divide d"));
    }
    match mode {
        AttentionMode::Global => {}
        AttentionMode::Conv1d { window } if window % 2 == 0 => {}
        AttentionMode::Conv2d { window, head_span } if window % 2 == 0 && head_span % 2 == 0 => {}
        _ => return Err(Error::invalid(format!("odd window in {mode}"))),
    }
    let len = x.shape()[0];
    let dh = d / heads;

    // q[h][i][c] etc., computed column by column from the full projection
    let project = |w: &Tensor| -> Vec<Vec<Vec<f64>>> {
        let mut out = vec![vec![vec![0.0; dh]; len]; heads];
        for (h, head) in out.iter_mut().enumerate() {
            for (i, row) in head.iter_mut().enumerate() {
                for (c, slot) in row.iter_mut().enumerate() {
                    let col = h * dh + c;
                    let mut s = 0.0;
                    for t in 0..d {
                        s += x.at(&[i, t]) * w.at(&[t, col]);
                    }
                    *slot = s;
                }
            }
        }
        out
    };
    let q = project(&params.w_q);
    let k = project(&params.w_k);
    let v = project(&params.w_v);

    let mut concat = vec![vec![0.0; d]; len];
    for h in 0..heads {
        for i in 0..len {
            let mut slots = Vec::new();
            for s in 0..heads {
                for j in 0..len {
                    if in_scope(mode, h, i, s, j) {
                        slots.push((s, j));
                    }
                }
            }
            let mut scores = Vec::with_capacity(slots.len());
            for &(s, j) in &slots {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[h][i][c] * k[s][j][c];
                }
                scores.push(dot / (dh as f64).sqrt());
            }
            let mut top = f64::NEG_INFINITY;
            for &sc in &scores {
                if sc > top {
                    top = sc;
                }
            }
            let mut z = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - top).exp();
                z += *sc;
            }
            for (n, &(s, j)) in slots.iter().enumerate() {
                let w = scores[n] / z;
                for c in 0..dh {
                    concat[i][h * dh + c] += w * v[s][j][c];
                }
            }
        }
    }

    let mut out = Tensor::zeros(&[len, d]);
    for (i, row) in concat.iter().enumerate() {
        for col in 0..d {
            let mut s = 0.0;
            for (t, &val) in row.iter().enumerate() {
                s += val * params.w_o.at(&[t, col]);
            }
            out.set(&[i, col], s);
        }
    }
    Ok(out)
}

fn ref_layer_norm(x: &mut [Vec<f64>], gain: &Tensor, bias: &Tensor) {
    for row in x.iter_mut() {
        let n = row.len() as f64;
        let mut mean = 0.0;
        for &v in row.iter() {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for &v in row.iter() {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let denom = (var + LAYER_NORM_EPS).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / denom * gain.data()[c] + bias.data()[c];
        }
    }
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Tensor {
    let width = rows[0].len();
    Tensor::from_vec(&[rows.len(), width], rows.iter().flatten().copied().collect())
}

/// Loop-based post-norm encoder layer.
pub fn ref_encoder_layer(x: &Tensor, p: &LayerParams, mode: AttentionMode) -> Result<Tensor> {
    let attn = ref_attend(x, &p.attention, mode)?;
    let d = x.shape()[1];
    let d_ff = p.ffn_in.shape()[1];
    let mut h1: Vec<Vec<f64>> = to_rows(x);
    for (i, row) in h1.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += attn.at(&[i, c]);
        }
    }
    ref_layer_norm(&mut h1, &p.norm1_gain, &p.norm1_bias);

    let mut h2 = h1.clone();
    for (i, row) in h2.iter_mut().enumerate() {
        let mut hidden = vec![0.0; d_ff];
        for (f, slot) in hidden.iter_mut().enumerate() {
            let mut s = p.ffn_in_bias.data()[f];
            for c in 0..d {
                s += h1[i][c] * p.ffn_in.at(&[c, f]);
            }
            *slot = if s > 0.0 { s } else { 0.0 };
        }
        for (c, v) in row.iter_mut().enumerate() {
            let mut s = p.ffn_out_bias.data()[c];
            for (f, &hv) in hidden.iter().enumerate() {
                s += hv * p.ffn_out.at(&[f, c]);
            }
            *v += s;
        }
    }
    ref_layer_norm(&mut h2, &p.norm2_gain, &p.norm2_bias);
    Ok(from_rows(&h2))
}

/// Loop-based full forward pass: embedding·√d + sinusoids, layer stack, linear head.
pub fn ref_encode(tokens: &[usize], params: &EncoderParams, config: &EncoderConfig) -> Result<Tensor> {
    let d = config.d_model;
    let mut x = vec![vec![0.0; d]; tokens.len()];
    for (i, row) in x.iter_mut().enumerate() {
        let tok = tokens[i];
        if tok >= config.vocab_size {
            return Err(Error::invalid(format!("token {tok} out of vocabulary")));
        }
        for (c, v) in row.iter_mut().enumerate() {
            let pair = (c / 2) * 2;
            let angle = i as f64 / 10000f64.powf(pair as f64 / d as f64);
            let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            *v = params.embedding.at(&[tok, c]) * (d as f64).sqrt() + pe;
        }
    }
    let mut h = from_rows(&x);
    for (layer, &mode) in params.layers.iter().zip(&config.layer_modes) {
        h = ref_encoder_layer(&h, layer, mode)?;
    }
    let v = config.vocab_size;
    let mut logits = Tensor::zeros(&[tokens.len(), v]);
    for i in 0..tokens.len() {
        for o in 0..v {
            let mut s = params.head_bias.data()[o];
            for c in 0..d {
                s += h.at(&[i, c]) * params.head_weight.at(&[c, o]);
            }
            logits.set(&[i, o], s);
        }
    }
    Ok(logits)
}
