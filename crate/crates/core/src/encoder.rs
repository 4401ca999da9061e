//! Toy Transformer encoder with a per-token classification head.
//!
//! Layers are post-norm: `X₁ = LN(X + Attn(X))`, `out = LN(X₁ + FFN(X₁))`.
//! Windowed attention modes may only sit below global layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, AttentionTrace, MultiHeadParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape and per-layer attention scope of an encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layer_modes: Vec<AttentionMode>,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    /// Builds and validates a config.
    pub fn new(
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        layer_modes: Vec<AttentionMode>,
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        let config = EncoderConfig {
            n_layers: layer_modes.len(),
            d_model,
            n_heads,
            d_ff,
            layer_modes,
            vocab_size,
            max_len,
        };
        config.validate()?;
        Ok(config)
    }

    /// Four layers, d=64, H=4, d_ff=128, with `lower` in the lowest two layers.
    pub fn toy(vocab_size: usize, max_len: usize, lower: AttentionMode) -> Result<Self> {
        Self::new(64, 4, 128, hierarchical_modes(4, 2, lower), vocab_size, max_len)
    }

    /// Two layers, d=8, H=2, d_ff=16; small enough for exhaustive finite differences.
    pub fn gradcheck_toy(mode: AttentionMode) -> Result<Self> {
        Self::new(8, 2, 16, vec![mode; 2], 8, 32)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be positive".into());
        }
        if self.layer_modes.len() != self.n_layers {
            return fail(format!(
                "layer_modes has {} entries for {} layers",
                self.layer_modes.len(),
                self.n_layers
            ));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return fail("d_model, d_ff, vocab_size and max_len must be positive".into());
        }
        if self.d_model % 2 != 0 {
            return fail(format!("d_model must be even, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("{} heads do not divide d_model {}", self.n_heads, self.d_model));
        }
        for (l, mode) in self.layer_modes.iter().enumerate() {
            mode.validate().map_err(|e| Error::Config(format!("layer {l}: {e}")))?;
        }
        if let Some(first_global) = self.layer_modes.iter().position(|m| m.is_global()) {
            if let Some(l) = self.layer_modes[first_global..].iter().position(|m| !m.is_global()) {
                return fail(format!(
                    "layer {} is {} above global layer {first_global}; windowed attention is only allowed in lower layers",
                    first_global + l,
                    self.layer_modes[first_global + l]
                ));
            }
        }
        Ok(())
    }

    /// Same dimensions with every layer global.
    pub fn all_global(&self) -> Self {
        EncoderConfig {
            layer_modes: vec![AttentionMode::Global; self.n_layers],
            ..self.clone()
        }
    }

    /// Number of windowed (non-global) layers at the bottom of the stack.
    pub fn windowed_layers(&self) -> usize {
        self.layer_modes.iter().take_while(|m| !m.is_global()).count()
    }
}

/// `count` layers of `lower` followed by global layers.
pub fn hierarchical_modes(n_layers: usize, count: usize, lower: AttentionMode) -> Vec<AttentionMode> {
    (0..n_layers)
        .map(|l| if l < count { lower } else { AttentionMode::Global })
        .collect()
}

/// Parameters of a single encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attention: MultiHeadParams,
    pub ffn_in: Tensor,
    pub ffn_in_bias: Tensor,
    pub ffn_out: Tensor,
    pub ffn_out_bias: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

const LAYER_TENSORS: [&str; 12] = [
    "attention.w_q",
    "attention.w_k",
    "attention.w_v",
    "attention.w_o",
    "ffn.w_in",
    "ffn.b_in",
    "ffn.w_out",
    "ffn.b_out",
    "norm1.gain",
    "norm1.bias",
    "norm2.gain",
    "norm2.bias",
];

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], limit, rng)
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        Ok(LayerParams {
            attention: MultiHeadParams::random(d, heads, rng)?,
            ffn_in: glorot(d, d_ff, rng),
            ffn_in_bias: Tensor::zeros(&[d_ff]),
            ffn_out: glorot(d_ff, d, rng),
            ffn_out_bias: Tensor::zeros(&[d]),
            norm1_gain: Tensor::ones(&[d]),
            norm1_bias: Tensor::zeros(&[d]),
            norm2_gain: Tensor::ones(&[d]),
            norm2_bias: Tensor::zeros(&[d]),
        })
    }

    fn tensors(&self) -> [&Tensor; 12] {
        let a = &self.attention;
        [
            &a.w_q,
            &a.w_k,
            &a.w_v,
            &a.w_o,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        let a = &mut self.attention;
        [
            &mut a.w_q,
            &mut a.w_k,
            &mut a.w_v,
            &mut a.w_o,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Tape handles of one layer's parameters, in canonical order.
#[derive(Clone, Copy, Debug)]
struct LayerVars([Var; 12]);

impl LayerVars {
    fn bind(tape: &mut Tape, p: &LayerParams) -> Self {
        LayerVars(p.tensors().map(|t| tape.leaf(t.clone())))
    }
}

/// Records one encoder layer on `tape`; returns the output and the attention trace.
fn layer_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &LayerVars,
    heads: usize,
    mode: AttentionMode,
) -> Result<(Var, AttentionTrace)> {
    let [w_q, w_k, w_v, w_o, w_in, b_in, w_out, b_out, g1, b1, g2, b2] = vars.0;
    let q = tape.matmul(x, w_q)?;
    let q = tape.split_heads(q, heads)?;
    let k = tape.matmul(x, w_k)?;
    let k = tape.split_heads(k, heads)?;
    let v = tape.matmul(x, w_v)?;
    let v = tape.split_heads(v, heads)?;
    let (heads_out, trace) = tape.attention(q, k, v, mode)?;
    let merged = tape.merge_heads(heads_out)?;
    let attn = tape.matmul(merged, w_o)?;

    let res1 = tape.add(x, attn)?;
    let x1 = tape.layer_norm(res1, g1, b1)?;

    let hidden = tape.matmul(x1, w_in)?;
    let hidden = tape.add_row(hidden, b_in)?;
    let hidden = tape.relu(hidden);
    let ffn = tape.matmul(hidden, w_out)?;
    let ffn = tape.add_row(ffn, b_out)?;

    let res2 = tape.add(x1, ffn)?;
    let out = tape.layer_norm(res2, g2, b2)?;
    Ok((out, trace))
}

/// One post-norm encoder layer applied to `[I, d]` activations.
pub fn encoder_layer(x: &Tensor, params: &LayerParams, mode: AttentionMode) -> Result<Tensor> {
    let d = params.attention.width();
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(Error::mismatch("encoder_layer", x.shape(), &[x.shape()[0], d]));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = LayerVars::bind(&mut tape, params);
    let (out, _) = layer_on_tape(&mut tape, xv, &vars, params.attention.heads, mode)?;
    Ok(tape.value(out).clone())
}

/// `PE[i, 2t] = sin(i / 10000^(2t/d))`, `PE[i, 2t+1] = cos(i / 10000^(2t/d))`.
pub fn sinusoidal_pe(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding width must be even, got {d}")));
    }
    if len == 0 {
        return Err(Error::invalid("positional encoding length must be positive"));
    }
    let mut pe = Tensor::zeros(&[len, d]);
    for i in 0..len {
        let row = pe.row_mut(i);
        for t in 0..d / 2 {
            let angle = i as f64 / 10000f64.powf((2 * t) as f64 / d as f64);
            row[2 * t] = angle.sin();
            row[2 * t + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Every trainable tensor of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Result of recording a full forward pass on a tape.
#[derive(Debug)]
pub struct EncoderForward {
    pub logits: Var,
    /// Parameter leaves in canonical order (see [`EncoderParams::names`]).
    pub params: Vec<Var>,
    pub traces: Vec<AttentionTrace>,
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embedding = glorot(config.vocab_size, d, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::init(d, config.n_heads, config.d_ff, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_weight = glorot(d, config.vocab_size, rng);
        Ok(EncoderParams {
            embedding,
            layers,
            head_weight,
            head_bias: Tensor::zeros(&[config.vocab_size]),
        })
    }

    /// Canonical tensor names, in checkpoint and optimizer order.
    pub fn names(config: &EncoderConfig) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for l in 0..config.n_layers {
            names.extend(LAYER_TENSORS.iter().map(|t| format!("layers.{l}.{t}")));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Canonical tensor shapes matching [`EncoderParams::names`].
    pub fn shapes(config: &EncoderConfig) -> Vec<Vec<usize>> {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let layer = [
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
        ];
        let mut shapes = vec![vec![v, d]];
        for _ in 0..config.n_layers {
            shapes.extend(layer.iter().cloned());
        }
        shapes.push(vec![d, v]);
        shapes.push(vec![v]);
        shapes
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Rebuilds parameters from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(Self::names(config)) {
            if t.shape() != s.as_slice() {
                return Err(Error::invalid(format!(
                    "{name}: expected shape {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        let embedding = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let (w_q, w_k, w_v, w_o) = (next(), next(), next(), next());
            layers.push(LayerParams {
                attention: MultiHeadParams::new(w_q, w_k, w_v, w_o, config.n_heads)?,
                ffn_in: next(),
                ffn_in_bias: next(),
                ffn_out: next(),
                ffn_out_bias: next(),
                norm1_gain: next(),
                norm1_bias: next(),
                norm2_gain: next(),
                norm2_bias: next(),
            });
        }
        let head_weight = next();
        let head_bias = next();
        Ok(EncoderParams {
            embedding,
            layers,
            head_weight,
            head_bias,
        })
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_compatible(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        let shapes = Self::shapes(config);
        let tensors = self.tensors();
        if tensors.len() != shapes.len()
            || tensors.iter().zip(&shapes).any(|(t, s)| t.shape() != s.as_slice())
        {
            return Err(Error::invalid("parameters do not match the encoder config"));
        }
        Ok(())
    }

    /// Records embedding, layer stack and classification head on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, tokens: &[usize], config: &EncoderConfig) -> Result<EncoderForward> {
        self.check_compatible(config)?;
        let len = tokens.len();
        if len == 0 || len > config.max_len {
            return Err(Error::invalid(format!(
                "sequence length {len} outside 1..={}",
                config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::invalid(format!(
                "token {bad} out of vocabulary 0..{}",
                config.vocab_size
            )));
        }
        let d = config.d_model;
        let mut params = Vec::with_capacity(2 + 12 * config.n_layers + 1);
        let embedding = tape.leaf(self.embedding.clone());
        params.push(embedding);
        let layer_vars: Vec<LayerVars> = self.layers.iter().map(|l| LayerVars::bind(tape, l)).collect();
        for lv in &layer_vars {
            params.extend(lv.0);
        }
        let head_w = tape.leaf(self.head_weight.clone());
        let head_b = tape.leaf(self.head_bias.clone());
        params.push(head_w);
        params.push(head_b);

        let emb = tape.gather(embedding, tokens)?;
        let emb = tape.scale(emb, (d as f64).sqrt());
        let pe = tape.leaf(sinusoidal_pe(len, d)?);
        let mut x = tape.add(emb, pe)?;

        let mut traces = Vec::with_capacity(config.n_layers);
        for (lv, &mode) in layer_vars.iter().zip(&config.layer_modes) {
            let (out, trace) = layer_on_tape(tape, x, lv, config.n_heads, mode)?;
            traces.push(trace);
            x = out;
        }
        let logits = tape.matmul(x, head_w)?;
        let logits = tape.add_row(logits, head_b)?;
        Ok(EncoderForward { logits, params, traces })
    }
}

/// Per-token logits `[I, vocab_size]` for `tokens`.
pub fn encode(tokens: &[usize], params: &EncoderParams, config: &EncoderConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fwd = params.forward_on_tape(&mut tape, tokens, config)?;
    Ok(tape.value(fwd.logits).clone())
}

/// Like [`encode`] but also returns every layer's attention trace.
pub fn encode_with_traces(
    tokens: &[usize],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<(Tensor, Vec<AttentionTrace>)> {
    let mut tape = Tape::new();
    let fwd = params.forward_on_tape(&mut tape, tokens, config)?;
    Ok((tape.value(fwd.logits).clone(), fwd.traces))
}

/// Closed-form parameter count of `config`; independent of `layer_modes`.
pub fn total_params(config: &EncoderConfig) -> usize {
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d;
    v * d + config.n_layers * per_layer + d * v + v
}
