//! Experiment front end: config files, flag overrides, the subcommand runners
//! and their CSV outputs.
//!
//! CSV schemas (header row first, column order fixed):
//!
//! | output    | columns                                         |
//! |-----------|-------------------------------------------------|
//! | metrics   | `step,loss,accuracy`                            |
//! | sweep     | `axis_value,final_loss,final_accuracy,steps`    |
//! | bench     | `I,mode,M,N,median_seconds,trials`              |
//! | gradcheck | `tensor,max_rel_error`                          |
//! | trace     | `layer,head,query,key_head,key,weight`          |
//!
//! The trace CSV lists only active (non-zero-by-construction) entries.
//! Exit codes: 0 success, 1 validation error, 2 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionMode, AttentionTrace, MultiHeadParams};
use crate::autodiff::{BackwardFault, Tape};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::encoder::{encode_with_traces, total_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::oracle::{finite_diff, gradient_error};
use crate::tasks::{generate, write_examples, TaskSpec};
use crate::tensor::Tensor;
use crate::training::{cross_entropy, evaluate, init_params, train_with, Metrics, TrainConfig, TrainRun};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// Largest model `gradcheck` accepts.
pub const GRADCHECK_MAX_PARAMS: usize = 20_000;
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Sequence length used by `gradcheck`.
pub const GRADCHECK_LEN: usize = 5;

pub const MIN_BENCH_TRIALS: usize = 5;

// ---------------------------------------------------------------------------
// Config files

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[value(name = "window")]
    WindowM,
    #[value(name = "head-span")]
    HeadSpanN,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    /// Window held fixed while sweeping the head span.
    #[serde(default)]
    pub fixed_window: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub modes: Vec<AttentionMode>,
    pub trials: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            lengths: vec![128, 256, 512, 1024],
            modes: vec![
                AttentionMode::Global,
                AttentionMode::Conv1d { window: 10 },
                AttentionMode::Conv2d { window: 10, head_span: 2 },
            ],
            trials: 7,
            d_model: 64,
            n_heads: 4,
            seed: 0,
        }
    }
}

/// Everything a config file may contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: EncoderConfig,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub bench: Option<BenchSpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.model.validate()?;
        if let Some(task) = &config.task {
            task.validate()?;
        }
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task(&self) -> Result<&TaskSpec> {
        self.task
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [task] section".into()))
    }
}

// ---------------------------------------------------------------------------
// Flag overrides

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Global,
    Conv1d,
    Conv2d,
}

/// Flags shared by every subcommand; values override the config file.
#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV path (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides both the task and the training seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Attention mode of the lower (windowed) layers
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Window size M (even)
    #[arg(long)]
    pub window: Option<usize>,
    /// Head span N (even)
    #[arg(long = "head-span")]
    pub head_span: Option<usize>,
}

/// Rewrites the lower layers' attention mode from flag values.
///
/// The lower layers are the config's existing windowed layers or, when it has
/// none, the bottom half of the stack.
pub fn apply_mode_overrides(
    model: &mut EncoderConfig,
    mode: Option<ModeArg>,
    window: Option<usize>,
    head_span: Option<usize>,
) -> Result<()> {
    if mode.is_none() && window.is_none() && head_span.is_none() {
        return Ok(());
    }
    if mode == Some(ModeArg::Global) {
        if window.is_some() || head_span.is_some() {
            return Err(Error::Config("--window/--head-span make no sense with --mode global".into()));
        }
        model.layer_modes = vec![AttentionMode::Global; model.n_layers];
        return model.validate();
    }
    let existing = model.windowed_layers();
    let lower = if existing > 0 { existing } else { (model.n_layers / 2).max(1) };
    let current = model.layer_modes[0];
    let kind = match mode {
        Some(m) => m,
        None if head_span.is_some() => ModeArg::Conv2d,
        None => match current {
            AttentionMode::Conv2d { .. } => ModeArg::Conv2d,
            _ => ModeArg::Conv1d,
        },
    };
    let window = window
        .or(current.window())
        .ok_or_else(|| Error::Config("a windowed mode needs --window".into()))?;
    let new_mode = match kind {
        ModeArg::Conv1d => {
            if head_span.is_some() {
                return Err(Error::Config("--head-span requires conv2d".into()));
            }
            AttentionMode::conv1d(window)?
        }
        ModeArg::Conv2d => AttentionMode::conv2d(window, head_span.or(current.head_span()).unwrap_or(0))?,
        ModeArg::Global => unreachable!(),
    };
    for m in model.layer_modes.iter_mut().take(lower) {
        *m = new_mode;
    }
    model.validate()
}

/// Loads the config (if any) and applies seed and mode overrides.
pub fn resolve_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    apply_common(&mut config, args)?;
    Ok(config)
}

fn apply_common(config: &mut ExperimentConfig, args: &CommonArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        config.train.seed = seed;
        if let Some(task) = &mut config.task {
            task.seed = seed;
        }
    }
    apply_mode_overrides(&mut config.model, args.mode, args.window, args.head_span)
}

// ---------------------------------------------------------------------------
// CSV

fn f(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_csv(history: &[Metrics]) -> String {
    let mut s = String::from("step,loss,accuracy\n");
    for m in history {
        writeln!(s, "{},{},{}", m.step, f(m.loss), f(m.accuracy)).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis_value: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub steps: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis_value,final_loss,final_accuracy,steps\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.axis_value, f(r.final_loss), f(r.final_accuracy), r.steps).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub len: usize,
    pub mode: AttentionMode,
    pub median_seconds: f64,
    pub trials: usize,
}

pub fn bench_csv(results: &[BenchResult]) -> String {
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("I,mode,M,N,median_seconds,trials\n");
    for r in results {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.len,
            r.mode.name(),
            opt(r.mode.window()),
            opt(r.mode.head_span()),
            f(r.median_seconds),
            r.trials
        )
        .unwrap();
    }
    s
}

/// Active trace entries of every layer.
pub fn trace_csv(traces: &[AttentionTrace]) -> String {
    let mut s = String::from("layer,head,query,key_head,key,weight\n");
    for (l, trace) in traces.iter().enumerate() {
        for h in 0..trace.heads() {
            for i in 0..trace.len() {
                let set = trace.active_set(h, i);
                for kh in set.heads.clone() {
                    for j in set.positions.clone() {
                        writeln!(s, "{l},{h},{i},{kh},{j},{}", f(trace.weight(h, i, kh, j))).unwrap();
                    }
                }
            }
        }
    }
    s
}

/// Splits a CSV produced by this module into its header and rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::Parse(format!("row {line:?} has {} fields, header {}", row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Runners

/// Trains the config's model on its task, logging evaluations to stderr.
pub fn run_train(config: &ExperimentConfig) -> Result<TrainRun> {
    let task = config.task()?;
    train_with(&config.model, task, &config.train, |m| {
        eprintln!("step {:>6}  loss {:.6}  acc {:.4}", m.step, m.loss, m.accuracy);
    })
}

fn sweep_layers(base: &EncoderConfig) -> usize {
    match base.windowed_layers() {
        0 => (base.n_layers / 2).max(1),
        n => n,
    }
}

/// Configs for each sweep value, all validated before anything trains.
pub fn sweep_configs(base: &ExperimentConfig, axis: SweepAxis, values: &[usize], fixed_window: Option<usize>) -> Result<Vec<EncoderConfig>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let task = base.task()?;
    let lower = sweep_layers(&base.model);
    let current = base.model.layer_modes[0];
    values
        .iter()
        .map(|&v| {
            let mode = match axis {
                SweepAxis::WindowM => {
                    if v > task.seq_len {
                        return Err(Error::Config(format!("window {v} exceeds seq_len {}", task.seq_len)));
                    }
                    match current {
                        AttentionMode::Conv2d { head_span, .. } => AttentionMode::conv2d(v, head_span),
                        _ => AttentionMode::conv1d(v),
                    }
                }
                SweepAxis::HeadSpanN => {
                    if v > base.model.n_heads {
                        return Err(Error::Config(format!("head span {v} exceeds {} heads", base.model.n_heads)));
                    }
                    let window = fixed_window.or(current.window()).ok_or_else(|| {
                        Error::Config("head-span sweep needs a fixed window (sweep.fixed_window or --window)".into())
                    })?;
                    AttentionMode::conv2d(window, v)
                }
            }
            .map_err(|e| Error::Config(format!("sweep value {v}: {e}")))?;
            let mut model = base.model.clone();
            for m in model.layer_modes.iter_mut().take(lower) {
                *m = mode;
            }
            model.validate()?;
            Ok(model)
        })
        .collect()
}

/// One training run per value along `axis`; one row per value.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[usize], fixed_window: Option<usize>) -> Result<Vec<SweepRow>> {
    let configs = sweep_configs(base, axis, values, fixed_window)?;
    let task = base.task()?;
    let mut rows = Vec::with_capacity(values.len());
    for (&v, model) in values.iter().zip(&configs) {
        eprintln!("sweep {axis:?} = {v}");
        let run = train_with(model, task, &base.train, |_| {})?;
        let last = run
            .final_metrics()
            .copied()
            .ok_or_else(|| Error::Config("sweep run recorded no metrics (max_steps = 0?)".into()))?;
        rows.push(SweepRow {
            axis_value: v,
            final_loss: last.loss,
            final_accuracy: last.accuracy,
            steps: last.step,
        });
    }
    Ok(rows)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median forward time of [`attend`] per (length, mode), one warm-up excluded.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchResult>> {
    if spec.trials < MIN_BENCH_TRIALS {
        return Err(Error::Config(format!("bench needs at least {MIN_BENCH_TRIALS} trials")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = MultiHeadParams::random(spec.d_model, spec.n_heads, &mut rng)?;
    for m in &spec.modes {
        m.validate()?;
    }
    let mut results = Vec::new();
    for &len in &spec.lengths {
        for &mode in &spec.modes {
            let mut times = Vec::with_capacity(spec.trials);
            for trial in 0..=spec.trials {
                let x = Tensor::uniform(&[len, spec.d_model], 1.0, &mut rng);
                let start = Instant::now();
                let out = attend(&x, &params, mode)?;
                let elapsed = start.elapsed().as_secs_f64();
                std::hint::black_box(&out);
                if trial > 0 {
                    times.push(elapsed.max(f64::MIN_POSITIVE));
                }
            }
            results.push(BenchResult {
                len,
                mode,
                median_seconds: median(&mut times),
                trials: spec.trials,
            });
        }
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Worst relative error per parameter tensor, canonical order.
    pub rows: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|(_, e)| *e < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tensor,max_rel_error\n");
        for (name, e) in &self.rows {
            writeln!(s, "{name},{}", f(*e)).unwrap();
        }
        s
    }
}

/// Central-difference check of every parameter gradient of `config`.
pub fn run_gradcheck(config: &EncoderConfig, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with_fault(config, seed, None)
}

#[doc(hidden)]
pub fn gradcheck_with_fault(config: &EncoderConfig, seed: u64, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    config.validate()?;
    let n = total_params(config);
    if n > GRADCHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradcheck model has {n} parameters; limit is {GRADCHECK_MAX_PARAMS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EncoderParams::init(config, &mut rng)?;
    let len = GRADCHECK_LEN.min(config.max_len);
    let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let targets: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect();

    let mut tape = Tape::with_fault(fault);
    let fwd = params.forward_on_tape(&mut tape, &tokens, config)?;
    let loss = tape.cross_entropy(fwd.logits, &targets)?;
    let grads = tape.backward(loss)?;

    let base: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let loss_at = |idx: usize, t: &Tensor| -> f64 {
        let mut tensors = base.clone();
        tensors[idx] = t.clone();
        let p = EncoderParams::from_tensors(config, tensors).expect("same shapes");
        let logits = crate::encoder::encode(&tokens, &p, config).expect("forward");
        cross_entropy(&logits, &targets).expect("loss")
    };

    let mut rows = Vec::with_capacity(base.len());
    for (idx, name) in EncoderParams::names(config).into_iter().enumerate() {
        let analytic = grads
            .get(fwd.params[idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base[idx].shape()));
        let numeric = finite_diff(|t| loss_at(idx, t), &base[idx], GRADCHECK_EPS);
        rows.push((name, gradient_error(&analytic, &numeric)));
    }
    Ok(GradcheckReport {
        rows,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamsReport {
    pub a: usize,
    pub b: usize,
}

impl ParamsReport {
    pub fn difference(&self) -> i64 {
        self.b as i64 - self.a as i64
    }

    pub fn equal(&self) -> bool {
        self.a == self.b
    }
}

pub fn run_params(a: &EncoderConfig, b: &EncoderConfig) -> ParamsReport {
    ParamsReport {
        a: total_params(a),
        b: total_params(b),
    }
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(name = "csan", version, about = "Windowed and cross-head self-attention experiments")]
pub struct RunSpec {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the config's task and write the metrics CSV
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Save final parameters to this checkpoint file
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the generated training set (tokens<TAB>labels per line)
        #[arg(long)]
        dump_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or freshly initialized parameters) on the eval split
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the attention trace CSV of the first eval example
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train once per window size or head span
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        /// Comma-separated even values
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Compare backward gradients with central finite differences
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Time the attention forward pass for growing sequence lengths
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Compare parameter counts of two configs (default: against the all-global variant)
    Params {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        against: Option<PathBuf>,
    },
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_VALIDATION
    }
}

/// Executes a parsed command line and returns the exit status.
pub fn run(spec: RunSpec) -> i32 {
    match dispatch(spec.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train {
            common,
            checkpoint,
            dump_data,
        } => {
            let config = resolve_config(&common)?;
            if let Some(path) = &dump_data {
                let data = generate(config.task()?)?;
                write_examples(BufWriter::new(fs::File::create(path)?), &data.train)?;
            }
            let run = run_train(&config)?;
            emit(common.out.as_deref(), &metrics_csv(&run.history))?;
            if let Some(path) = &checkpoint {
                write_checkpoint(BufWriter::new(fs::File::create(path)?), &config.model, &run.params)?;
            }
            Ok(EXIT_OK)
        }
        Command::Eval {
            common,
            checkpoint,
            trace,
        } => {
            let config = resolve_config(&common)?;
            let params = match &checkpoint {
                Some(path) => read_checkpoint(BufReader::new(fs::File::open(path)?), &config.model)?,
                None => init_params(&config.model, config.train.seed)?,
            };
            let data = generate(config.task()?)?;
            let m = evaluate(&params, &config.model, &data.eval, 0)?;
            if let Some(path) = &trace {
                let (_, traces) = encode_with_traces(&data.eval[0].tokens, &params, &config.model)?;
                fs::write(path, trace_csv(&traces))?;
            }
            emit(common.out.as_deref(), &metrics_csv(&[m]))?;
            Ok(EXIT_OK)
        }
        Command::Sweep { common, axis, values } => {
            let config = resolve_config(&common)?;
            let section = config.sweep.clone();
            let axis = axis
                .or(section.as_ref().map(|s| s.axis))
                .ok_or_else(|| Error::Config("sweep needs --axis or a [sweep] section".into()))?;
            let values = values
                .or(section.as_ref().map(|s| s.values.clone()))
                .ok_or_else(|| Error::Config("sweep needs --values or a [sweep] section".into()))?;
            let fixed = common.window.or(section.and_then(|s| s.fixed_window));
            let rows = run_sweep(&config, axis, &values, fixed)?;
            emit(common.out.as_deref(), &sweep_csv(&rows))?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { common } => {
            let (model, seed) = match &common.config {
                Some(_) => {
                    let c = resolve_config(&common)?;
                    (c.model, c.train.seed)
                }
                None => {
                    let mut model = EncoderConfig::gradcheck_toy(AttentionMode::Global)?;
                    if common.mode.is_some() || common.window.is_some() || common.head_span.is_some() {
                        // all layers follow the requested mode
                        apply_mode_overrides(&mut model, common.mode, common.window, common.head_span)?;
                        let lower = model.layer_modes[0];
                        model.layer_modes = vec![lower; model.n_layers];
                        model.validate()?;
                    }
                    (model, common.seed.unwrap_or(0))
                }
            };
            let report = run_gradcheck(&model, seed)?;
            for (name, e) in &report.rows {
                eprintln!("{name:<28} {e:.3e}");
            }
            emit(common.out.as_deref(), &report.to_csv())?;
            if report.passed() {
                eprintln!("gradcheck passed (worst {:.3e} < {:.0e})", report.worst(), report.tolerance);
                Ok(EXIT_OK)
            } else {
                eprintln!("gradcheck FAILED (worst {:.3e} >= {:.0e})", report.worst(), report.tolerance);
                Ok(EXIT_NUMERIC)
            }
        }
        Command::Bench {
            common,
            lengths,
            trials,
        } => {
            let mut spec = match &common.config {
                Some(_) => resolve_config(&common)?.bench.unwrap_or_default(),
                None => BenchSpec::default(),
            };
            if let Some(l) = lengths {
                spec.lengths = l;
            }
            if let Some(t) = trials {
                spec.trials = t;
            }
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            if common.window.is_some() || common.head_span.is_some() || common.mode.is_some() {
                let window = common.window.unwrap_or(10);
                let mut modes = vec![AttentionMode::Global];
                match common.mode {
                    Some(ModeArg::Global) => {}
                    Some(ModeArg::Conv1d) => modes.push(AttentionMode::conv1d(window)?),
                    Some(ModeArg::Conv2d) => modes.push(AttentionMode::conv2d(window, common.head_span.unwrap_or(0))?),
                    None => {
                        modes.push(AttentionMode::conv1d(window)?);
                        if let Some(n) = common.head_span {
                            modes.push(AttentionMode::conv2d(window, n)?);
                        }
                    }
                }
                spec.modes = modes;
            }
            let results = run_bench(&spec)?;
            emit(common.out.as_deref(), &bench_csv(&results))?;
            Ok(EXIT_OK)
        }
        Command::Params { common, against } => {
            let a = resolve_config(&common)?.model;
            let b = match &against {
                Some(path) => ExperimentConfig::load(path)?.model,
                None => a.all_global(),
            };
            let report = run_params(&a, &b);
            let text = format!(
                "config_a,config_b,difference\n{},{},{}\n",
                report.a,
                report.b,
                report.difference()
            );
            emit(common.out.as_deref(), &text)?;
            Ok(if report.equal() { EXIT_OK } else { EXIT_VALIDATION })
        }
    }
}
