//! Multi-head scaled dot-product self-attention in three scopes.
//!
//! * [`AttentionMode::Global`]: every query attends to every position of its own head.
//! * [`AttentionMode::Conv1d`]: query `i` attends to positions `i-M/2 ..= i+M/2` of its own head.
//! * [`AttentionMode::Conv2d`]: the same position window, taken over heads `h-N/2 ..= h+N/2`,
//!   with a single softmax over the whole `(heads × positions)` area.
//!
//! Windows are truncated at the sequence and head boundaries; the softmax
//! normalizes over whatever survives. None of the modes introduces parameters.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{merge_heads, softmax_slice, split_heads, Tensor};

/// Scope of the key/value set each query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttentionMode {
    Global,
    /// Local window of `window + 1` positions centred on the query.
    Conv1d { window: usize },
    /// Local window spanning `head_span + 1` adjacent heads.
    Conv2d { window: usize, head_span: usize },
}

impl AttentionMode {
    pub fn conv1d(window: usize) -> Result<Self> {
        let mode = AttentionMode::Conv1d { window };
        mode.validate()?;
        Ok(mode)
    }

    pub fn conv2d(window: usize, head_span: usize) -> Result<Self> {
        let mode = AttentionMode::Conv2d { window, head_span };
        mode.validate()?;
        Ok(mode)
    }

    /// Rejects odd window or head-span values.
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttentionMode::Global => Ok(()),
            AttentionMode::Conv1d { window } => check_even("window", window),
            AttentionMode::Conv2d { window, head_span } => {
                check_even("window", window)?;
                check_even("head_span", head_span)
            }
        }
    }

    pub fn is_global(&self) -> bool {
        matches!(self, AttentionMode::Global)
    }

    /// Window size M, if the mode has one.
    pub fn window(&self) -> Option<usize> {
        match *self {
            AttentionMode::Global => None,
            AttentionMode::Conv1d { window } | AttentionMode::Conv2d { window, .. } => Some(window),
        }
    }

    /// Head span N, if the mode has one.
    pub fn head_span(&self) -> Option<usize> {
        match *self {
            AttentionMode::Conv2d { head_span, .. } => Some(head_span),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionMode::Global => "global",
            AttentionMode::Conv1d { .. } => "conv1d",
            AttentionMode::Conv2d { .. } => "conv2d",
        }
    }

    /// Active key/value rectangle for query `(head, pos)`.
    pub fn active_set(&self, head: usize, pos: usize, heads: usize, len: usize) -> Result<ActiveSet> {
        self.validate()?;
        let set = match *self {
            AttentionMode::Global => {
                if head >= heads || pos >= len {
                    return Err(Error::invalid(format!(
                        "query ({head}, {pos}) outside {heads} heads × {len} positions"
                    )));
                }
                ActiveSet {
                    heads: head..head + 1,
                    positions: 0..len,
                }
            }
            AttentionMode::Conv1d { window } => {
                if head >= heads {
                    return Err(Error::invalid(format!("head {head} out of range 0..{heads}")));
                }
                ActiveSet {
                    heads: head..head + 1,
                    positions: window_positions(pos, len, window)?,
                }
            }
            AttentionMode::Conv2d { window, head_span } => ActiveSet {
                heads: head_window(head, heads, head_span)?,
                positions: window_positions(pos, len, window)?,
            },
        };
        Ok(set)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match *self {
            AttentionMode::Global => "global".to_string(),
            AttentionMode::Conv1d { window } => format!("conv1d(M={window})"),
            AttentionMode::Conv2d { window, head_span } => {
                format!("conv2d(M={window},N={head_span})")
            }
        };
        f.pad(&text)
    }
}

fn check_even(name: &str, value: usize) -> Result<()> {
    if value % 2 != 0 {
        return Err(Error::invalid(format!("{name} must be even, got {value}")));
    }
    Ok(())
}

/// Rectangle of key/value slots (head range × position range) visible to one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    pub heads: Range<usize>,
    pub positions: Range<usize>,
}

impl ActiveSet {
    pub fn len(&self) -> usize {
        self.heads.len() * self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, head: usize, pos: usize) -> bool {
        self.heads.contains(&head) && self.positions.contains(&pos)
    }
}

/// Positions `max(0, i - M/2) ..= min(I - 1, i + M/2)`.
pub fn window_positions(i: usize, len: usize, window: usize) -> Result<Range<usize>> {
    if i >= len {
        return Err(Error::invalid(format!("position {i} out of range 0..{len}")));
    }
    check_even("window", window)?;
    let half = window / 2;
    Ok(i.saturating_sub(half)..(i + half + 1).min(len))
}

/// Heads `max(0, h - N/2) ..= min(H - 1, h + N/2)`.
pub fn head_window(h: usize, heads: usize, span: usize) -> Result<Range<usize>> {
    if h >= heads {
        return Err(Error::invalid(format!("head {h} out of range 0..{heads}")));
    }
    check_even("head_span", span)?;
    let half = span / 2;
    Ok(h.saturating_sub(half)..(h + half + 1).min(heads))
}

/// Query, key and value projections plus the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl MultiHeadParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let d = w_q.shape()[0];
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [d, d] {
                return Err(Error::mismatch("MultiHeadParams", w.shape(), &[d, d]));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
        }
        Ok(MultiHeadParams {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    /// Glorot-uniform initialization of all four projections.
    pub fn random<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let limit = (6.0 / (2 * d) as f64).sqrt();
        let w_q = Tensor::uniform(&[d, d], limit, rng);
        let w_k = Tensor::uniform(&[d, d], limit, rng);
        let w_v = Tensor::uniform(&[d, d], limit, rng);
        let w_o = Tensor::uniform(&[d, d], limit, rng);
        Self::new(w_q, w_k, w_v, w_o, heads)
    }

    pub fn identity(d: usize, heads: usize) -> Result<Self> {
        Self::new(Tensor::eye(d), Tensor::eye(d), Tensor::eye(d), Tensor::eye(d), heads)
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }
}

/// Number of scalars in a [`MultiHeadParams`]: `4·d²` whatever the mode.
pub fn count_params(params: &MultiHeadParams) -> usize {
    [&params.w_q, &params.w_k, &params.w_v, &params.w_o]
        .iter()
        .map(|w| w.len())
        .sum()
}

/// Attention probabilities of one call, stored per query as a rectangle plus weights.
///
/// Logically a `[H, I, H, I]` tensor (query head, query position, key head,
/// key position); [`AttentionTrace::to_dense`] materializes it.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    heads: usize,
    len: usize,
    rows: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq)]
struct TraceRow {
    set: ActiveSet,
    /// Head-major over `set`.
    weights: Vec<f64>,
}

impl AttentionTrace {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn row(&self, head: usize, pos: usize) -> &TraceRow {
        &self.rows[head * self.len + pos]
    }

    pub fn active_set(&self, head: usize, pos: usize) -> &ActiveSet {
        &self.row(head, pos).set
    }

    /// Weight that query `(head, pos)` puts on key `(key_head, key_pos)`; exactly 0 outside the active set.
    pub fn weight(&self, head: usize, pos: usize, key_head: usize, key_pos: usize) -> f64 {
        let row = self.row(head, pos);
        if !row.set.contains(key_head, key_pos) {
            return 0.0;
        }
        let w = row.set.positions.len();
        row.weights[(key_head - row.set.heads.start) * w + key_pos - row.set.positions.start]
    }

    /// Weights of the active set of query `(head, pos)`, head-major.
    pub fn active_weights(&self, head: usize, pos: usize) -> &[f64] {
        &self.row(head, pos).weights
    }

    pub fn to_dense(&self) -> Tensor {
        let (h, n) = (self.heads, self.len);
        let mut out = Tensor::zeros(&[h, n, h, n]);
        let data = out.data_mut();
        for (r, row) in self.rows.iter().enumerate() {
            let mut t = 0;
            for s in row.set.heads.clone() {
                for j in row.set.positions.clone() {
                    data[(r * h + s) * n + j] = row.weights[t];
                    t += 1;
                }
            }
        }
        out
    }
}

/// `Q, K, V = split_heads(X·W_Q), split_heads(X·W_K), split_heads(X·W_V)`.
pub fn project_qkv(x: &Tensor, params: &MultiHeadParams) -> Result<(Tensor, Tensor, Tensor)> {
    if x.rank() != 2 || x.shape()[1] != params.width() {
        return Err(Error::mismatch("project_qkv", x.shape(), params.w_q.shape()));
    }
    let q = split_heads(&x.matmul(&params.w_q)?, params.heads)?;
    let k = split_heads(&x.matmul(&params.w_k)?, params.heads)?;
    let v = split_heads(&x.matmul(&params.w_v)?, params.heads)?;
    Ok((q, k, v))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Softmax-weighted sum over the given key/value rows; writes weights and output.
fn attend_rows<'a>(
    q: &[f64],
    keys: impl Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
    weights: &mut Vec<f64>,
    out: &mut [f64],
) {
    let scale = 1.0 / (q.len() as f64).sqrt();
    weights.clear();
    weights.extend(keys.clone().map(|(k, _)| dot(q, k) * scale));
    softmax_slice(weights);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&w, (_, v)) in weights.iter().zip(keys) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}

/// Single-query attention over an explicit key/value selection.
///
/// Returns the output vector and the attention weights over the `S` rows.
pub fn scaled_dot_attention(q: &Tensor, k_sel: &Tensor, v_sel: &Tensor) -> Result<(Tensor, Tensor)> {
    let dh = q.len();
    if q.rank() != 1 || k_sel.rank() != 2 || v_sel.rank() != 2 {
        return Err(Error::invalid("scaled_dot_attention expects q:[dh], K,V:[S, dh]"));
    }
    if k_sel.shape() != v_sel.shape() || k_sel.shape()[1] != dh {
        return Err(Error::mismatch("scaled_dot_attention", k_sel.shape(), v_sel.shape()));
    }
    let s = k_sel.shape()[0];
    let rows = (0..s).map(|t| (k_sel.row(t), v_sel.row(t)));
    let mut weights = Vec::with_capacity(s);
    let mut out = vec![0.0; dh];
    attend_rows(q.data(), rows, &mut weights, &mut out);
    Ok((Tensor::from_vec(&[dh], out), Tensor::from_vec(&[s], weights)))
}

fn check_heads_layout(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let [h, n, dh] = q.shape()[..] else {
        return Err(Error::InvalidShape {
            shape: q.shape().to_vec(),
            reason: "expected [H, I, d/H]".into(),
        });
    };
    if k.shape() != q.shape() {
        return Err(Error::mismatch("attention", q.shape(), k.shape()));
    }
    if v.shape() != q.shape() {
        return Err(Error::mismatch("attention", q.shape(), v.shape()));
    }
    Ok((h, n, dh))
}

/// Per-head attention core on already projected `[H, I, d/H]` tensors.
pub fn attend_heads(q: &Tensor, k: &Tensor, v: &Tensor, mode: AttentionMode) -> Result<(Tensor, AttentionTrace)> {
    let (heads, len, dh) = check_heads_layout(q, k, v)?;
    let mut out = Tensor::zeros(q.shape());
    let mut rows = Vec::with_capacity(heads * len);
    let slot = |s: usize, j: usize| (s * len + j) * dh;
    for h in 0..heads {
        for i in 0..len {
            let set = mode.active_set(h, i, heads, len)?;
            let keys = set.heads.clone().flat_map(|s| {
                set.positions.clone().map(move |j| {
                    let o = slot(s, j);
                    (&k.data()[o..o + dh], &v.data()[o..o + dh])
                })
            });
            let mut weights = Vec::with_capacity(set.len());
            let qo = slot(h, i);
            attend_rows(
                &q.data()[qo..qo + dh],
                keys,
                &mut weights,
                &mut out.data_mut()[qo..qo + dh],
            );
            rows.push(TraceRow { set, weights });
        }
    }
    Ok((out, AttentionTrace { heads, len, rows }))
}

/// Vector–Jacobian product of [`attend_heads`]; returns `(dQ, dK, dV)`.
pub fn attend_heads_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    trace: &AttentionTrace,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    attend_heads_backward_impl(q, k, v, trace, d_out, true)
}

pub(crate) fn attend_heads_backward_impl(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    trace: &AttentionTrace,
    d_out: &Tensor,
    center: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (heads, len, dh) = check_heads_layout(q, k, v)?;
    if d_out.shape() != q.shape() {
        return Err(Error::mismatch("attention backward", q.shape(), d_out.shape()));
    }
    if trace.heads != heads || trace.len != len {
        return Err(Error::mismatch(
            "attention backward",
            &[heads, len],
            &[trace.heads, trace.len],
        ));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let slot = |s: usize, j: usize| (s * len + j) * dh;
    let mut dz = Vec::new();
    for h in 0..heads {
        for i in 0..len {
            let row = trace.row(h, i);
            let qo = slot(h, i);
            let g = &d_out.data()[qo..qo + dh];
            let qv = &q.data()[qo..qo + dh];

            dz.clear();
            let mut t = 0;
            for s in row.set.heads.clone() {
                for j in row.set.positions.clone() {
                    let o = slot(s, j);
                    let w = row.weights[t];
                    for (d, &gv) in dv.data_mut()[o..o + dh].iter_mut().zip(g) {
                        *d += w * gv;
                    }
                    dz.push(dot(g, &v.data()[o..o + dh]));
                    t += 1;
                }
            }
            let mean: f64 = if center {
                row.weights.iter().zip(&dz).map(|(w, d)| w * d).sum()
            } else {
                0.0
            };
            for (d, &w) in dz.iter_mut().zip(&row.weights) {
                *d = w * (*d - mean) * scale;
            }

            let mut t = 0;
            for s in row.set.heads.clone() {
                for j in row.set.positions.clone() {
                    let o = slot(s, j);
                    let c = dz[t];
                    for (d, &x) in dq.data_mut()[qo..qo + dh].iter_mut().zip(&k.data()[o..o + dh]) {
                        *d += c * x;
                    }
                    for (d, &x) in dk.data_mut()[o..o + dh].iter_mut().zip(qv) {
                        *d += c * x;
                    }
                    t += 1;
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Full multi-head self-attention: project, attend within `mode`, merge heads, apply `W_O`.
pub fn attend(x: &Tensor, params: &MultiHeadParams, mode: AttentionMode) -> Result<(Tensor, AttentionTrace)> {
    let (q, k, v) = project_qkv(x, params)?;
    let (heads_out, trace) = attend_heads(&q, &k, &v, mode)?;
    let out = merge_heads(&heads_out)?.matmul(&params.w_o)?;
    Ok((out, trace))
}
