//! Loss, optimizers, and the deterministic training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Tape};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tasks::{generate, Example, TaskSpec};
use crate::tensor::Tensor;

/// Mean token cross-entropy and the row-wise softmax probabilities.
pub(crate) fn cross_entropy_parts(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::mismatch("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let classes = logits.shape()[1];
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::invalid(format!("target {t} out of range 0..{classes}")));
        }
        let row = probs.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    Ok((total / targets.len() as f64, probs))
}

/// Mean over positions of `-log softmax(logits_i)[target_i]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    cross_entropy_parts(logits, targets).map(|(loss, _)| loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            batch_size: 16,
            max_steps: 2000,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed as a null-update run
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config("adam needs 0 <= beta < 1 and eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// First-order optimizer state over a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from each parameter's accumulated gradient.
    pub fn step(&mut self, params: &mut [Dual]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), s) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let m = m.data_mut();
                    let s = s.data_mut();
                    for (j, (v, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        s[j] = beta2 * s[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / c1;
                        let s_hat = s[j] / c2;
                        *v -= self.lr * m_hat / (s_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Evaluation snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and token accuracy of `params` on `examples`.
pub fn evaluate(params: &EncoderParams, config: &EncoderConfig, examples: &[Example], step: usize) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluate on an empty example set"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let logits = encode(&ex.tokens, params, config)?;
        loss += cross_entropy(&logits, &ex.labels)?;
        for (r, &label) in ex.labels.iter().enumerate() {
            if argmax(logits.row(r)) == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(Metrics {
        step,
        loss: loss / examples.len() as f64,
        accuracy: correct as f64 / total as f64,
    })
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// History and final parameters of a training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub history: Vec<Metrics>,
    pub params: EncoderParams,
}

impl TrainRun {
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.history.last()
    }
}

fn check_compatible(config: &EncoderConfig, task: &TaskSpec) -> Result<()> {
    config.validate()?;
    task.validate()?;
    if task.vocab_size > config.vocab_size || task.label_classes() > config.vocab_size {
        return Err(Error::Config(format!(
            "task needs {} input and {} output classes, encoder vocab is {}",
            task.vocab_size,
            task.label_classes(),
            config.vocab_size
        )));
    }
    if task.seq_len > config.max_len {
        return Err(Error::Config(format!(
            "task seq_len {} exceeds encoder max_len {}",
            task.seq_len, config.max_len
        )));
    }
    Ok(())
}

/// Fresh parameters drawn from the training seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EncoderParams::init(config, &mut rng)
}

/// Trains from scratch; see [`train_with`].
pub fn train(config: &EncoderConfig, task: &TaskSpec, tc: &TrainConfig) -> Result<TrainRun> {
    train_with(config, task, tc, |_| {})
}

/// Trains from scratch, calling `observe` after every evaluation.
///
/// Metrics are recorded every `eval_every` steps and after the last step.
pub fn train_with(
    config: &EncoderConfig,
    task: &TaskSpec,
    tc: &TrainConfig,
    mut observe: impl FnMut(&Metrics),
) -> Result<TrainRun> {
    check_compatible(config, task)?;
    tc.validate()?;
    let data = generate(task)?;

    let init = init_params(config, tc.seed)?;
    let mut duals: Vec<Dual> = init.tensors().into_iter().cloned().map(Dual::new).collect();
    let mut optimizer = Optimizer::new(tc.optimizer, tc.learning_rate);

    let mut order_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();

    let snapshot = |duals: &[Dual]| {
        EncoderParams::from_tensors(config, duals.iter().map(|d| d.value.clone()).collect())
    };

    let mut history = Vec::new();
    let mut params = snapshot(&duals)?;
    for step in 1..=tc.max_steps {
        for d in duals.iter_mut() {
            d.zero_grad();
        }
        let mut batch_loss = 0.0;
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let ex = &data.train[order[cursor]];
            cursor += 1;

            let mut tape = Tape::new();
            let fwd = params.forward_on_tape(&mut tape, &ex.tokens, config)?;
            let loss = tape.cross_entropy(fwd.logits, &ex.labels)?;
            batch_loss += tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            for (dual, var) in duals.iter_mut().zip(&fwd.params) {
                if let Some(g) = grads.take(*var) {
                    dual.accumulate(&g)?;
                }
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at step {step}")));
        }
        let inv = 1.0 / tc.batch_size as f64;
        for d in duals.iter_mut() {
            d.grad = d.grad.scale(inv);
        }
        optimizer.step(&mut duals);
        params = snapshot(&duals)?;

        if step % tc.eval_every == 0 || step == tc.max_steps {
            let m = evaluate(&params, config, &data.eval, step)?;
            if !m.loss.is_finite() {
                return Err(Error::Numeric(format!("eval loss is {} at step {step}", m.loss)));
            }
            observe(&m);
            history.push(m);
        }
    }
    Ok(TrainRun { history, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use crate::tasks::TaskKind;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[3, 5]);
        let loss = cross_entropy(&uniform, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);

        let l = cross_entropy(&Tensor::from_vec(&[1, 2], vec![1.0, 2.0]), &[1]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.313_262).abs() < 1e-6);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0, 700.0] {
            let l = cross_entropy(&Tensor::from_vec(&[1, 2], vec![margin, 0.0]), &[0]).unwrap();
            assert!(l <= prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-300);

        assert!(cross_entropy(&uniform, &[0, 5, 1]).is_err());
        assert!(cross_entropy(&uniform, &[0, 1]).is_err());
    }

    fn quadratic(kind: OptimizerKind, lr: f64) -> Vec<f64> {
        let mut p = vec![Dual::new(Tensor::scalar(5.0))];
        let mut opt = Optimizer::new(kind, lr);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let x = p[0].value.item();
            losses.push(0.5 * (x - 3.0) * (x - 3.0));
            p[0].zero_grad();
            p[0].accumulate(&Tensor::scalar(x - 3.0)).unwrap();
            opt.step(&mut p);
        }
        losses
    }

    #[test]
    fn optimizers_descend_on_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let losses = quadratic(kind, 1e-2);
            for w in losses.windows(2) {
                assert!(w[1] < w[0], "{kind:?}: {} -> {}", w[0], w[1]);
            }
        }
    }

    fn tiny() -> (EncoderConfig, TaskSpec, TrainConfig) {
        let config = EncoderConfig::new(8, 2, 16, vec![AttentionMode::Conv1d { window: 2 }, AttentionMode::Global], 6, 8).unwrap();
        let task = TaskSpec {
            kind: TaskKind::Copy,
            seq_len: 6,
            vocab_size: 6,
            pattern_len: None,
            n_train: 32,
            n_eval: 8,
            seed: 3,
        };
        let tc = TrainConfig {
            batch_size: 4,
            max_steps: 12,
            eval_every: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        (config, task, tc)
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (config, task, mut tc) = tiny();
        tc.learning_rate = 0.0;
        let run = train(&config, &task, &tc).unwrap();
        assert_eq!(run.params, init_params(&config, tc.seed).unwrap());
        let steps: Vec<usize> = run.history.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![5, 10, 12]);
        for m in &run.history {
            assert_eq!(m.loss, run.history[0].loss);
            assert_eq!(m.accuracy, run.history[0].accuracy);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (config, task, tc) = tiny();
        let a = train(&config, &task, &tc).unwrap();
        let b = train(&config, &task, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert!(a.history.last().unwrap().loss < a.history[0].loss + 1.0);
    }

    #[test]
    fn incompatible_task_rejected() {
        let (config, mut task, tc) = tiny();
        task.vocab_size = 10;
        assert!(train(&config, &task, &tc).is_err());
        let (config, mut task, tc) = tiny();
        task.seq_len = 9;
        assert!(train(&config, &task, &tc).is_err());
        let (config, task, mut tc) = tiny();
        tc.batch_size = 0;
        assert!(train(&config, &task, &tc).is_err());
    }

    #[test]
    fn evaluate_perfect_and_constant_predictors() {
        let config = EncoderConfig::new(8, 2, 16, vec![AttentionMode::Global], 4, 8).unwrap();
        let mut params = init_params(&config, 1).unwrap();
        // Zeroing everything but the head bias yields a constant predictor of class 1.
        for t in params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        params.head_bias = Tensor::from_vec(&[4], vec![0.0, 5.0, 0.0, 0.0]);
        let balanced = vec![
            Example { tokens: vec![0, 1, 2, 3], labels: vec![0, 1, 0, 1] },
            Example { tokens: vec![3, 2, 1, 0], labels: vec![1, 0, 1, 0] },
        ];
        let m = evaluate(&params, &config, &balanced, 0).unwrap();
        assert_eq!(m.accuracy, 0.5);

        let perfect: Vec<Example> = balanced
            .iter()
            .map(|e| Example { tokens: e.tokens.clone(), labels: vec![1; 4] })
            .collect();
        let m = evaluate(&params, &config, &perfect, 0).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.loss >= 0.0);
    }
}
