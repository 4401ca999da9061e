//! Acceptance criteria, run in order with one PASS/FAIL line each.
//! Exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{in_scope, instance, max_abs_diff, random_mode};
use csan::attention::{attend_heads, project_qkv};
use csan::cli::{metrics_csv, run_bench, run_gradcheck, run_sweep, BenchSpec, ExperimentConfig, SweepAxis};
use csan::oracle::ref_attend;
use csan::{attend, total_params, train_with, window_positions, AttentionMode, EncoderConfig, EncoderParams, OptimizerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn local_pattern() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/local_pattern.toml")).unwrap()
}

fn vanilla_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let inst = instance(&mut rng, 8, 16, 4);
        let (a, _) = attend(&inst.x, &inst.params, AttentionMode::Conv1d { window: 14 }).unwrap();
        let (b, _) = attend(&inst.x, &inst.params, AttentionMode::Global).unwrap();
        worst = worst.max(max_abs_diff(&a, &b));
    }
    outcome(worst <= 1e-12, format!("50 instances, max |diff| = {worst:e} (tolerance 1e-12)"))
}

fn mode_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..50 {
        let inst = instance(&mut rng, 8, 16, 4);
        let window = 2 * rng.gen_range(0..9);
        let (a, _) = attend(&inst.x, &inst.params, AttentionMode::Conv2d { window, head_span: 0 }).unwrap();
        let (b, _) = attend(&inst.x, &inst.params, AttentionMode::Conv1d { window }).unwrap();
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        mismatches += usize::from(!same);
    }
    outcome(mismatches == 0, format!("50 instances, {mismatches} not bit-identical"))
}

fn mask_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nonzero_outside = 0;
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(1..=12);
        let heads = rng.gen_range(1..=5);
        let dh = rng.gen_range(1..=3);
        let mode = random_mode(&mut rng, len, heads);
        let inst = instance(&mut rng, len, heads * dh, heads);
        let (_, trace) = attend(&inst.x, &inst.params, mode).unwrap();
        let dense = trace.to_dense();
        for h in 0..heads {
            for i in 0..len {
                let mut total = 0.0;
                for s in 0..heads {
                    for j in 0..len {
                        let w = dense.at(&[h, i, s, j]);
                        if in_scope(mode, h, i, s, j) {
                            total += w;
                        } else if w.to_bits() != 0 {
                            nonzero_outside += 1;
                        }
                    }
                }
                worst_sum = worst_sum.max((total - 1.0).abs());
            }
        }
    }
    outcome(
        nonzero_outside == 0 && worst_sum <= 1e-12,
        format!("100 draws, {nonzero_outside} non-zero inactive weights, max |row sum - 1| = {worst_sum:e}"),
    )
}

fn locality_ceiling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut leaks = 0;
    let mut checked = 0;
    for draw in 0..50 {
        let len = rng.gen_range(2..=12);
        let heads = rng.gen_range(1..=4);
        let mode = match draw % 3 {
            0 => AttentionMode::Global,
            1 => AttentionMode::Conv1d { window: common::even(&mut rng, len + 2) },
            _ => AttentionMode::Conv2d {
                window: common::even(&mut rng, len + 2),
                head_span: common::even(&mut rng, heads + 2),
            },
        };
        let window = mode.window().unwrap_or(2 * len);
        let inst = instance(&mut rng, len, 2 * heads, heads);
        let j = rng.gen_range(0..len);
        let mut x2 = inst.x.clone();
        for v in x2.row_mut(j) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let heads_out = |x: &csan::Tensor| {
            let (q, k, v) = project_qkv(x, &inst.params).unwrap();
            attend_heads(&q, &k, &v, mode).unwrap().0
        };
        let (a, b) = (heads_out(&inst.x), heads_out(&x2));
        for i in 0..len {
            if window_positions(i, len, window).unwrap().contains(&j) {
                continue;
            }
            for h in 0..heads {
                for c in 0..2 {
                    checked += 1;
                    leaks += usize::from(a.at(&[h, i, c]).to_bits() != b.at(&[h, i, c]).to_bits());
                }
            }
        }
    }
    outcome(leaks == 0, format!("50 draws, {checked} out-of-window outputs checked, {leaks} changed"))
}

fn oracle_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut boundary_windows = 0;
    for n in 0..100 {
        let len = rng.gen_range(1..=16);
        let heads = rng.gen_range(1..=6);
        let dh = rng.gen_range(1..=4);
        // cycle through the modes; every output row is compared, so rows
        // near i = 0, I-1 and heads near 0, H-1 are always covered
        let mode = match n % 3 {
            0 => AttentionMode::Global,
            1 => AttentionMode::Conv1d { window: common::even(&mut rng, 2 * len + 2) },
            _ => AttentionMode::Conv2d {
                window: common::even(&mut rng, 2 * len + 2),
                head_span: common::even(&mut rng, 2 * heads + 2),
            },
        };
        if mode.window().is_some_and(|m| m / 2 > 0 && m / 2 < len) {
            boundary_windows += 1;
        }
        let inst = instance(&mut rng, len, heads * dh, heads);
        let (fast, _) = attend(&inst.x, &inst.params, mode).unwrap();
        let slow = ref_attend(&inst.x, &inst.params, mode).unwrap();
        worst = worst.max(max_abs_diff(&fast, &slow));
    }
    outcome(
        worst <= 1e-9,
        format!("100 configs ({boundary_windows} with truncated windows), max |diff| = {worst:e} (tolerance 1e-9)"),
    )
}

fn gradient_check() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in [
        AttentionMode::Global,
        AttentionMode::Conv1d { window: 2 },
        AttentionMode::Conv2d { window: 2, head_span: 2 },
    ] {
        let config = EncoderConfig::gradcheck_toy(mode).unwrap();
        let report = run_gradcheck(&config, 0).unwrap();
        pass &= report.passed();
        parts.push(format!("{mode}: {} tensors, worst {:.2e}", report.rows.len(), report.worst()));
    }
    outcome(pass, format!("{} (tolerance 1e-4)", parts.join("; ")))
}

fn parameter_parity() -> Outcome {
    let choices = [
        AttentionMode::Global,
        AttentionMode::Conv1d { window: 4 },
        AttentionMode::Conv2d { window: 4, head_span: 2 },
        AttentionMode::Conv2d { window: 10, head_span: 4 },
    ];
    let base = EncoderConfig::toy(8, 20, AttentionMode::Global).unwrap();
    let expected = total_params(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut assignments = 0;
    let mut mismatches = 0;
    for code in 0..choices.len().pow(4) {
        let modes: Vec<_> = (0..4).map(|l| choices[code / choices.len().pow(l) % choices.len()]).collect();
        let config = EncoderConfig { layer_modes: modes, ..base.clone() };
        assignments += 1;
        mismatches += usize::from(total_params(&config) != expected);
        if config.validate().is_ok() {
            mismatches += usize::from(EncoderParams::init(&config, &mut rng).unwrap().count() != expected);
        }
    }
    outcome(
        mismatches == 0,
        format!("{assignments} layer-mode assignments, all {expected} parameters: {}", mismatches == 0),
    )
}

fn train_local(config: &ExperimentConfig) -> (csan::TrainRun, Duration) {
    let start = Instant::now();
    let run = train_with(&config.model, config.task().unwrap(), &config.train, |m| {
        eprintln!("    step {:>4}  loss {:.5}  accuracy {:.4}", m.step, m.loss, m.accuracy);
    })
    .unwrap();
    (run, start.elapsed())
}

fn local_learning(config: &ExperimentConfig, run: &csan::TrainRun, elapsed: Duration) -> Outcome {
    let last = run.final_metrics().unwrap();
    let setup_ok = config.train.max_steps == 2000
        && matches!(config.train.optimizer, OptimizerKind::Adam { .. })
        && config.model.layer_modes[..2] == [AttentionMode::Conv1d { window: 4 }; 2];
    outcome(
        setup_ok && last.accuracy >= 0.99 && elapsed < Duration::from_secs(300),
        format!(
            "accuracy {:.4} at step {} (need >= 0.99), {:.0}s (limit 300s)",
            last.accuracy,
            last.step,
            elapsed.as_secs_f64()
        ),
    )
}

fn window_sweep(config: &ExperimentConfig) -> Outcome {
    let values = [0, 2, 4, 6, 8];
    let rows = run_sweep(config, SweepAxis::WindowM, &values, None).unwrap();
    let acc = |m: usize| rows.iter().find(|r| r.axis_value == m).unwrap().final_accuracy;
    let small = acc(0).max(acc(2));
    let large = [4, 6, 8].map(acc).into_iter().fold(f64::INFINITY, f64::min);
    let table: Vec<String> = rows.iter().map(|r| format!("M={}: {:.4}", r.axis_value, r.final_accuracy)).collect();
    outcome(large >= small, format!("{} (min over M>=4 must be >= max over M<4)", table.join(", ")))
}

fn complexity_benefit() -> Outcome {
    let spec = BenchSpec {
        lengths: vec![128, 256, 512, 1024],
        modes: vec![AttentionMode::Global, AttentionMode::Conv1d { window: 10 }],
        trials: 7,
        d_model: 64,
        n_heads: 4,
        seed: 0,
    };
    let results = run_bench(&spec).unwrap();
    let ratios: Vec<f64> = results.chunks(2).map(|p| p[0].median_seconds / p[1].median_seconds).collect();
    let monotone = ratios.windows(2).all(|w| w[1] >= w[0]);
    let last = *ratios.last().unwrap();
    let shown: Vec<String> = spec.lengths.iter().zip(&ratios).map(|(i, r)| format!("I={i}: {r:.2}x")).collect();
    outcome(monotone && last > 3.0, format!("{} (non-decreasing, > 3x at 1024)", shown.join(", ")))
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut out = f();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed >= limit {
                out.pass = false;
                out.detail.push_str(&format!(" [over runtime limit {}s]", limit.as_secs()));
            }
        }
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {n:>2} {name}: {} ({:.2}s)", out.detail, elapsed.as_secs_f64());
        results.push((n, out));
    };
    let secs = Duration::from_secs;

    record(1, "vanilla equivalence", Some(secs(1)), &mut vanilla_equivalence);
    record(2, "mode degeneracy", Some(secs(1)), &mut mode_degeneracy);
    record(3, "mask exactness", Some(secs(5)), &mut mask_exactness);
    record(4, "locality ceiling", Some(secs(5)), &mut locality_ceiling);
    record(5, "oracle agreement", Some(secs(30)), &mut oracle_agreement);
    record(6, "gradient check", Some(secs(120)), &mut gradient_check);
    record(7, "parameter parity", None, &mut parameter_parity);

    let config = local_pattern();
    let mut first = None;
    record(8, "learning on the local task", None, &mut || {
        let (run, elapsed) = train_local(&config);
        let out = local_learning(&config, &run, elapsed);
        first = Some(run);
        out
    });
    let first = first.unwrap();
    record(9, "window sweep shape", Some(secs(25 * 60)), &mut || window_sweep(&config));
    record(10, "complexity benefit", Some(secs(300)), &mut complexity_benefit);
    record(11, "determinism", None, &mut || {
        let (second, _) = train_local(&config);
        let (a, b) = (metrics_csv(&first.history), metrics_csv(&second.history));
        outcome(a == b, format!("metrics CSV {} bytes, byte-identical: {}", a.len(), a == b))
    });

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
