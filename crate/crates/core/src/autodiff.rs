//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Forward calls on [`Tape`] evaluate eagerly and append a node; [`Tape::backward`]
//! walks the nodes in reverse, applying each op's vector–Jacobian product and
//! summing cotangents that reach the same node along different paths.

use crate::attention::{attend_heads, attend_heads_backward_impl, AttentionMode, AttentionTrace};
use crate::error::{Error, Result};
use crate::tensor::{layer_norm, masked_softmax, merge_heads, split_heads, Tensor};
use crate::training::cross_entropy_parts;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A parameter value with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Dual {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Dual { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate(&mut self, grad: &Tensor) -> Result<()> {
        self.grad.add_assign(grad)
    }
}

/// Deliberate errors that can be injected into backward rules.
///
/// Only meant for checking that gradient verification catches a broken rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Attention softmax backward drops the `-Σ w·g` centering term.
    UncenteredAttentionSoftmax,
    /// Layer-norm backward drops the mean-of-cotangent term.
    LayerNormMissingMean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Sum(Var),
    SplitHeads(Var),
    MergeHeads(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        trace: AttentionTrace,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Eagerly evaluated computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

/// Cotangents produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Tape {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let out = split_heads(self.value(a), heads)?;
        Ok(self.push(out, Op::SplitHeads(a)))
    }

    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let out = merge_heads(self.value(a))?;
        Ok(self.push(out, Op::MergeHeads(a)))
    }

    /// Selects rows `ids` of a `[V, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::invalid("gather expects a rank-2 table"));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::invalid(format!("index {id} out of range 0..{rows}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(&[ids.len(), width], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let ln = layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            ln.output,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed: ln.normed,
                inv_std: ln.inv_std,
            },
        ))
    }

    pub fn masked_softmax(&mut self, x: Var, active: &[bool]) -> Result<Var> {
        let out = masked_softmax(self.value(x), active)?;
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// Attention core on `[H, I, d/H]` inputs; also returns the weight trace.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mode: AttentionMode) -> Result<(Var, AttentionTrace)> {
        let (out, trace) = attend_heads(self.value(q), self.value(k), self.value(v), mode)?;
        let var = self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                trace: trace.clone(),
            },
        );
        Ok((var, trace))
    }

    /// Mean token cross-entropy of `[I, V]` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = cross_entropy_parts(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Backpropagates from a single-element output with seed cotangent 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let value = self.value(output);
        if value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward() needs a scalar output, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(output, Tensor::ones(value.shape()))
    }

    /// Backpropagates an arbitrary cotangent of `output`'s shape.
    pub fn backward_with(&self, output: Var, cotangent: Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.value(output).shape() {
            return Err(Error::mismatch("backward", self.value(output).shape(), cotangent.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(cotangent);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |var: Var, t: Tensor| -> Result<()> {
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.matmul(&bv.transpose()?)?)?;
                acc(*b, av.transpose()?.matmul(g)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?)?;
                acc(*b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddRow(a, bias) => {
                let n = g.row_len();
                let mut db = Tensor::zeros(&[n]);
                for row in g.data().chunks(n) {
                    for (d, &x) in db.data_mut().iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*a, g.clone())?;
                acc(*bias, db)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = Tensor::from_fn(x.shape(), |i| if x.data()[i] > 0.0 { g.data()[i] } else { 0.0 });
                acc(*a, d)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                acc(*a, Tensor::filled(shape, g.item()))?;
            }
            Op::SplitHeads(a) => acc(*a, merge_heads(g)?)?,
            Op::MergeHeads(a) => {
                let heads = self.value(*a).shape()[0];
                acc(*a, split_heads(g, heads)?)?;
            }
            Op::Gather { table, ids } => {
                let mut d = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (x, &y) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(*table, d)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let width = gv.len();
                let mut dgain = Tensor::zeros(&[width]);
                let mut dbias = Tensor::zeros(&[width]);
                let mut dx = Tensor::zeros(normed.shape());
                let keep_mean = self.fault != Some(BackwardFault::LayerNormMissingMean);
                for (r, &s) in inv_std.iter().enumerate() {
                    let gy = g.row(r);
                    let n = normed.row(r);
                    let dn: Vec<f64> = gy.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    for j in 0..width {
                        dgain.data_mut()[j] += gy[j] * n[j];
                        dbias.data_mut()[j] += gy[j];
                    }
                    let mean_dn = if keep_mean {
                        dn.iter().sum::<f64>() / width as f64
                    } else {
                        0.0
                    };
                    let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = s * (dn[j] - mean_dn - n[j] * mean_dn_n);
                    }
                }
                acc(*x, dx)?;
                acc(*gain, dgain)?;
                acc(*bias, dbias)?;
            }
            Op::MaskedSoftmax(x) => {
                let w = &self.nodes[idx].value;
                acc(*x, masked_softmax_vjp(w, g)?)?;
            }
            Op::Attention { q, k, v, trace } => {
                let center = self.fault != Some(BackwardFault::UncenteredAttentionSoftmax);
                let (dq, dk, dv) =
                    attend_heads_backward_impl(self.value(*q), self.value(*k), self.value(*v), trace, g, center)?;
                acc(*q, dq)?;
                acc(*k, dk)?;
                acc(*v, dv)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r)[t] -= 1.0;
                }
                acc(*logits, d.scale(g.item() / rows))?;
            }
        }
        Ok(())
    }
}

/// VJP of softmax given its output `w`: `w ⊙ (g − Σ w·g)`. Inactive entries (w = 0) get 0.
pub fn masked_softmax_vjp(w: &Tensor, g: &Tensor) -> Result<Tensor> {
    if w.shape() != g.shape() {
        return Err(Error::mismatch("masked_softmax backward", w.shape(), g.shape()));
    }
    let dot: f64 = w.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
    Ok(Tensor::from_fn(w.shape(), |i| w.data()[i] * (g.data()[i] - dot)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff, gradient_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    /// Checks d/dx of `sum(w ⊙ f(x))` for a random weighting `w`.
    fn check_unary(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let weights = {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = build(&mut tape, xv);
            rand_t(tape.value(y).shape(), 77)
        };
        let f = |t: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(t.clone());
            let y = build(&mut tape, xv);
            tape.value(y).mul(&weights).unwrap().sum()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = build(&mut tape, xv);
        let grads = tape.backward_with(y, weights.clone()).unwrap();
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_diff(f, x, EPS);
        let err = gradient_error(&analytic, &numeric);
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn matmul_identity_passes_cotangent_through() {
        let mut tape = Tape::new();
        let a = tape.leaf(rand_t(&[3, 3], 1));
        let b = tape.leaf(Tensor::eye(3));
        let c = tape.matmul(a, b).unwrap();
        let g = rand_t(&[3, 3], 2);
        let grads = tape.backward_with(c, g.clone()).unwrap();
        assert_eq!(grads.get(a).unwrap(), &g);
    }

    #[test]
    fn scale_by_zero_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_t(&[3, 4], 3));
        let y = tape.scale(x, 0.0);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cotangent_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_t(&[3, 4], 3));
        assert!(tape.backward_with(x, Tensor::zeros(&[4, 3])).is_err());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_t(&[2, 2], 4));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z);
        let grads = tape.backward(s).unwrap();
        // d/dx sum(2x·x) = 4x
        let expect = tape.value(x).scale(4.0);
        let err = gradient_error(grads.get(x).unwrap(), &expect);
        assert!(err < 1e-15);
    }

    #[test]
    fn matmul_vjp_matches_finite_differences() {
        let b = rand_t(&[4, 3], 11);
        check_unary(&rand_t(&[3, 4], 10), |t, a| {
            let bv = t.leaf(b.clone());
            t.matmul(a, bv).unwrap()
        });
        let a = rand_t(&[3, 4], 12);
        check_unary(&rand_t(&[4, 2], 13), |t, b| {
            let av = t.leaf(a.clone());
            t.matmul(av, b).unwrap()
        });
    }

    #[test]
    fn elementwise_vjps_match_finite_differences() {
        let other = rand_t(&[3, 4], 21);
        check_unary(&rand_t(&[3, 4], 20), |t, x| {
            let o = t.leaf(other.clone());
            t.add(x, o).unwrap()
        });
        check_unary(&rand_t(&[3, 4], 22), |t, x| {
            let o = t.leaf(other.clone());
            t.sub(o, x).unwrap()
        });
        check_unary(&rand_t(&[3, 4], 23), |t, x| {
            let o = t.leaf(other.clone());
            t.mul(x, o).unwrap()
        });
        check_unary(&rand_t(&[3, 4], 24), |t, x| t.scale(x, -2.5));
        check_unary(&rand_t(&[3, 4], 25), |t, x| t.relu(x));
        let bias = rand_t(&[4], 26);
        check_unary(&rand_t(&[3, 4], 27), |t, x| {
            let b = t.leaf(bias.clone());
            t.add_row(x, b).unwrap()
        });
        let base = rand_t(&[3, 4], 28);
        check_unary(&rand_t(&[4], 29), |t, b| {
            let x = t.leaf(base.clone());
            t.add_row(x, b).unwrap()
        });
    }

    #[test]
    fn head_reshapes_match_finite_differences() {
        check_unary(&rand_t(&[3, 4], 30), |t, x| t.split_heads(x, 2).unwrap());
        check_unary(&rand_t(&[2, 3, 2], 31), |t, x| t.merge_heads(x).unwrap());
    }

    #[test]
    fn layer_norm_vjp_matches_finite_differences() {
        let gain = rand_t(&[4], 40);
        let bias = rand_t(&[4], 41);
        let x = rand_t(&[3, 4], 42);
        check_unary(&x, |t, x| {
            let g = t.leaf(gain.clone());
            let b = t.leaf(bias.clone());
            t.layer_norm(x, g, b).unwrap()
        });
        check_unary(&gain, |t, g| {
            let xv = t.leaf(x.clone());
            let b = t.leaf(bias.clone());
            t.layer_norm(xv, g, b).unwrap()
        });
        check_unary(&bias, |t, b| {
            let xv = t.leaf(x.clone());
            let g = t.leaf(gain.clone());
            t.layer_norm(xv, g, b).unwrap()
        });
    }

    #[test]
    fn masked_softmax_vjp_matches_finite_differences() {
        let active = [true, false, true, true, false, true, true, true, true, false, true, true];
        check_unary(&rand_t(&[12], 50), |t, x| t.masked_softmax(x, &active).unwrap());
    }

    #[test]
    fn cross_entropy_vjp_matches_finite_differences() {
        let targets = [1, 3, 0];
        check_unary(&rand_t(&[3, 4], 60), |t, x| t.cross_entropy(x, &targets).unwrap());
    }

    #[test]
    fn gather_vjp_matches_finite_differences() {
        check_unary(&rand_t(&[3, 4], 70), |t, x| t.gather(x, &[2, 0, 2, 1]).unwrap());
    }

    #[test]
    fn attention_vjp_matches_finite_differences() {
        let modes = [
            AttentionMode::Global,
            AttentionMode::Conv1d { window: 2 },
            AttentionMode::Conv2d { window: 2, head_span: 2 },
        ];
        for mode in modes {
            let q = rand_t(&[3, 4, 2], 80);
            let k = rand_t(&[3, 4, 2], 81);
            let v = rand_t(&[3, 4, 2], 82);
            check_unary(&q, |t, qv| {
                let kv = t.leaf(k.clone());
                let vv = t.leaf(v.clone());
                t.attention(qv, kv, vv, mode).unwrap().0
            });
            check_unary(&k, |t, kv| {
                let qv = t.leaf(q.clone());
                let vv = t.leaf(v.clone());
                t.attention(qv, kv, vv, mode).unwrap().0
            });
            check_unary(&v, |t, vv| {
                let qv = t.leaf(q.clone());
                let kv = t.leaf(k.clone());
                t.attention(qv, kv, vv, mode).unwrap().0
            });
        }
    }

    #[test]
    fn dual_starts_with_zero_grad() {
        let mut d = Dual::new(rand_t(&[2, 3], 90));
        assert!(d.grad.data().iter().all(|&g| g == 0.0));
        d.accumulate(&Tensor::ones(&[2, 3])).unwrap();
        d.accumulate(&Tensor::ones(&[2, 3])).unwrap();
        assert!(d.grad.data().iter().all(|&g| g == 2.0));
        d.zero_grad();
        assert_eq!(d.grad, Tensor::zeros(&[2, 3]));
        assert!(d.accumulate(&Tensor::ones(&[3, 2])).is_err());
    }
}
