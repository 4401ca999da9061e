//! Seeded synthetic sequence-tagging tasks.
//!
//! * `Copy`: label at `i` is the token at `i`.
//! * `Reverse`: label at `i` is the token at `I-1-i`; needs global context.
//! * `LocalPattern`: a fixed pattern of length `k` is drawn from the seed; the
//!   label at `i` is 1 when tokens `max(0,i-k) ..= min(I-1,i+k)` contain the
//!   pattern contiguously, otherwise 0. A Conv1D window of `M = 2k` sees exactly
//!   what a label depends on.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    LocalPattern,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Pattern length `k`; LocalPattern only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_len: Option<usize>,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Generated train and eval splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

const PATTERN_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seq_len == 0 {
            return fail("seq_len must be positive".into());
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return fail("n_train and n_eval must be positive".into());
        }
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                if self.vocab_size == 0 {
                    return fail("vocab_size must be positive".into());
                }
                if self.pattern_len.is_some() {
                    return fail(format!("pattern_len is only meaningful for local_pattern, not {:?}", self.kind));
                }
            }
            TaskKind::LocalPattern => {
                if self.vocab_size < 2 {
                    return fail("local_pattern needs vocab_size >= 2 (labels 0 and 1)".into());
                }
                match self.pattern_len {
                    None => return fail("local_pattern needs pattern_len".into()),
                    Some(0) => return fail("pattern_len must be positive".into()),
                    Some(k) if k > self.seq_len => {
                        return fail(format!("pattern_len {k} exceeds seq_len {}", self.seq_len))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Largest label value plus one.
    pub fn label_classes(&self) -> usize {
        match self.kind {
            TaskKind::LocalPattern => 2,
            _ => self.vocab_size,
        }
    }

    /// The hidden pattern of a LocalPattern task.
    pub fn pattern(&self) -> Option<Vec<usize>> {
        let k = self.pattern_len?;
        if self.kind != TaskKind::LocalPattern {
            return None;
        }
        let mut rng = stream(self.seed, PATTERN_STREAM);
        Some((0..k).map(|_| rng.gen_range(0..self.vocab_size)).collect())
    }

    /// Labels of `tokens` under this task.
    pub fn label(&self, tokens: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => tokens.to_vec(),
            TaskKind::Reverse => tokens.iter().rev().copied().collect(),
            TaskKind::LocalPattern => {
                let k = self.pattern_len.unwrap_or(0);
                let pattern = self.pattern().unwrap_or_default();
                local_pattern_labels(tokens, &pattern, k)
            }
        }
    }
}

/// `label[i] = 1` iff `tokens[max(0,i-k) ..= min(I-1,i+k)]` contains `pattern` contiguously.
pub fn local_pattern_labels(tokens: &[usize], pattern: &[usize], k: usize) -> Vec<usize> {
    let len = tokens.len();
    (0..len)
        .map(|i| {
            let lo = i.saturating_sub(k);
            let hi = (i + k + 1).min(len);
            let window = &tokens[lo..hi];
            usize::from(!pattern.is_empty() && window.windows(pattern.len()).any(|w| w == pattern))
        })
        .collect()
}

fn sample(spec: &TaskSpec, rng: &mut ChaCha8Rng, count: usize) -> Vec<Example> {
    (0..count)
        .map(|_| {
            let tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
            let labels = spec.label(&tokens);
            Example { tokens, labels }
        })
        .collect()
}

/// Deterministically generates train and eval sets from independent RNG streams.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let train = sample(spec, &mut stream(spec.seed, TRAIN_STREAM), spec.n_train);
    let eval = sample(spec, &mut stream(spec.seed, EVAL_STREAM), spec.n_eval);
    Ok(Dataset { train, eval })
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// One example per line: `tokens<TAB>labels`, both space-separated.
pub fn write_examples<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    for ex in examples {
        writeln!(w, "{}\t{}", join(&ex.tokens), join(&ex.labels))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<Example>> {
    let parse = |field: &str, line_no: usize| -> Result<Vec<usize>> {
        field
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {line_no}: {s:?}: {e}")))
            })
            .collect()
    };
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (tokens, labels) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("line {}: missing tab separator", n + 1)))?;
        let tokens = parse(tokens, n + 1)?;
        let labels = parse(labels, n + 1)?;
        if tokens.len() != labels.len() {
            return Err(Error::Parse(format!(
                "line {}: {} tokens but {} labels",
                n + 1,
                tokens.len(),
                labels.len()
            )));
        }
        out.push(Example { tokens, labels });
    }
    Ok(out)
}
