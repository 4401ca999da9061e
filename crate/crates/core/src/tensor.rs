//! Dense row-major `f64` tensor and the forward kernels built on it.
//!
//! Every reduction sums in ascending index order so that results are
//! reproducible bit-for-bit across runs.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: vec![],
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panicking constructor for literals whose shape is known to be valid.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape, data).expect("literal tensor shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor by evaluating `f` on each flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Samples every entry uniformly from `[-limit, limit]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            if limit == 0.0 {
                0.0
            } else {
                rng.gen_range(-limit..=limit)
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        flat
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    /// Length of the innermost axis.
    pub fn row_len(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Row `r` when the tensor is viewed as `[len / row_len, row_len]`.
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a rank-2 tensor"),
            }),
        }
    }

    /// Matrix product `[m,k]·[k,n]`, accumulating each entry in ascending `k`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::mismatch("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(Elementwise::Add, self, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(Elementwise::Sub, self, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(Elementwise::Mul, self, Operand::Tensor(other))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// In-place `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::mismatch("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2("add_row")?;
        if bias.shape != [n] {
            return Err(Error::mismatch("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }
}

/// Pointwise binary operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Right-hand operand of an elementwise op: a same-shaped tensor or a scalar.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

pub fn elementwise(kind: Elementwise, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
    let f = match kind {
        Elementwise::Add => |x: f64, y: f64| x + y,
        Elementwise::Sub => |x: f64, y: f64| x - y,
        Elementwise::Mul => |x: f64, y: f64| x * y,
    };
    match b {
        Operand::Scalar(c) => Ok(a.map(|x| f(x, c))),
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                let op = match kind {
                    Elementwise::Add => "add",
                    Elementwise::Sub => "sub",
                    Elementwise::Mul => "mul",
                };
                return Err(Error::mismatch(op, &a.shape, &b.shape));
            }
            Ok(Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            })
        }
    }
}

const TILE_R: usize = 4;
const TILE_C: usize = 8;

/// `c = a·b` for row-major `a:[m,k]`, `b:[k,n]`. Each entry starts at 0 and
/// adds `a[i,t]·b[t,j]` for `t = 0, 1, ..`, whatever the tiling.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let full_rows = m - m % TILE_R;
    let full_cols = n - n % TILE_C;
    for i in (0..full_rows).step_by(TILE_R) {
        for j in (0..full_cols).step_by(TILE_C) {
            let mut acc = [[0.0f64; TILE_C]; TILE_R];
            for t in 0..k {
                let bt: &[f64; TILE_C] = b[t * n + j..t * n + j + TILE_C].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let ar = a[(i + r) * k + t];
                    for (x, &bv) in row.iter_mut().zip(bt) {
                        *x += ar * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + TILE_C].copy_from_slice(row);
            }
        }
        for r in i..i + TILE_R {
            matmul_row_tail(a, b, c, r, k, n, full_cols);
        }
    }
    for r in full_rows..m {
        matmul_row_tail(a, b, c, r, k, n, 0);
    }
}

/// Row `r` of `c`, columns `from..n`.
fn matmul_row_tail(a: &[f64], b: &[f64], c: &mut [f64], r: usize, k: usize, n: usize, from: usize) {
    if from == n {
        return;
    }
    let c_row = &mut c[r * n + from..(r + 1) * n];
    for t in 0..k {
        let av = a[r * k + t];
        for (x, &bv) in c_row.iter_mut().zip(&b[t * n + from..(t + 1) * n]) {
            *x += av * bv;
        }
    }
}


/// Softmax restricted to `active` positions; inactive outputs are exactly zero.
pub fn masked_softmax(logits: &Tensor, active: &[bool]) -> Result<Tensor> {
    if logits.rank() != 1 {
        return Err(Error::InvalidShape {
            shape: logits.shape.clone(),
            reason: "masked_softmax expects a vector".into(),
        });
    }
    if active.len() != logits.len() {
        return Err(Error::mismatch("masked_softmax", &logits.shape, &[active.len()]));
    }
    let mut out = logits.data.clone();
    masked_softmax_slice(&mut out, active)?;
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
    })
}

/// In-place masked softmax over a slice.
pub fn masked_softmax_slice(values: &mut [f64], active: &[bool]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (&v, &on) in values.iter().zip(active) {
        if on && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("masked_softmax: empty active set"));
    }
    let mut total = 0.0;
    for (v, &on) in values.iter_mut().zip(active) {
        if on {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for (v, &on) in values.iter_mut().zip(active) {
        if on {
            *v /= total;
        }
    }
    Ok(())
}

/// Stable softmax over a full slice, in place.
pub(crate) fn softmax_slice(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// `[I, d]` → `[H, I, d/H]`, head `h` taking the contiguous column block `h·d/H..(h+1)·d/H`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (len, width) = x.dims2("split_heads")?;
    if heads == 0 || width % heads != 0 {
        return Err(Error::invalid(format!(
            "split_heads: {heads} heads do not divide width {width}"
        )));
    }
    let dh = width / heads;
    let mut out = Vec::with_capacity(x.len());
    for h in 0..heads {
        for i in 0..len {
            out.extend_from_slice(&x.data[i * width + h * dh..i * width + (h + 1) * dh]);
        }
    }
    Ok(Tensor {
        shape: vec![heads, len, dh],
        data: out,
    })
}

/// Inverse of [`split_heads`]: `[H, I, d/H]` → `[I, d]`.
pub fn merge_heads(xh: &Tensor) -> Result<Tensor> {
    let [heads, len, dh] = xh.shape[..] else {
        return Err(Error::InvalidShape {
            shape: xh.shape.clone(),
            reason: "merge_heads expects [H, I, d/H]".into(),
        });
    };
    let width = heads * dh;
    let mut out = vec![0.0; len * width];
    for h in 0..heads {
        for i in 0..len {
            let src = &xh.data[(h * len + i) * dh..(h * len + i + 1) * dh];
            out[i * width + h * dh..i * width + (h + 1) * dh].copy_from_slice(src);
        }
    }
    Ok(Tensor {
        shape: vec![len, width],
        data: out,
    })
}

/// Epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm output together with the statistics the backward pass needs.
#[derive(Clone, Debug)]
pub struct LayerNormOutput {
    pub output: Tensor,
    /// Normalized input before gain and bias.
    pub normed: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<LayerNormOutput> {
    let (rows, width) = x.dims2("layer_norm")?;
    if gain.shape != [width] {
        return Err(Error::mismatch("layer_norm", &x.shape, &gain.shape));
    }
    if bias.shape != [width] {
        return Err(Error::mismatch("layer_norm", &x.shape, &bias.shape));
    }
    let mut normed = x.clone();
    let mut output = x.clone();
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(s);
        let n_row = normed.row_mut(r);
        for (n, &v) in n_row.iter_mut().zip(row) {
            *n = (v - mean) * s;
        }
        let n_row = normed.row(r).to_vec();
        for (j, o) in output.row_mut(r).iter_mut().enumerate() {
            *o = n_row[j] * gain.data[j] + bias.data[j];
        }
    }
    Ok(LayerNormOutput {
        output,
        normed,
        inv_std,
    })
}
