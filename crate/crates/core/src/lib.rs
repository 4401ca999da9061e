//! Convolutional self-attention: multi-head attention restricted to a local
//! window of positions (1D) or a window of positions and neighbouring heads
//! (2D), plus a small post-norm encoder, reverse-mode gradients, synthetic
//! tagging tasks, a training loop and loop-based reference implementations.
//!
//! All arithmetic is `f64` and every reduction sums in a fixed order, so equal
//! seeds give bit-identical results.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod oracle;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use attention::{attend, attend_heads, head_window, window_positions, AttentionMode, AttentionTrace, MultiHeadParams};
pub use encoder::{encode, encode_with_traces, total_params, EncoderConfig, EncoderParams};
pub use error::{Error, Result};
pub use tasks::{generate, Dataset, Example, TaskKind, TaskSpec};
pub use tensor::Tensor;
pub use training::{train, train_with, Metrics, OptimizerKind, TrainConfig, TrainRun};
