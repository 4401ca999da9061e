//! Forward-pass time of global vs windowed attention as the sequence grows.
//!
//!     cargo run --release --example bench_attention

use csan::cli::{bench_csv, run_bench, BenchSpec};
use csan::AttentionMode;

fn main() -> csan::Result<()> {
    let spec = BenchSpec {
        modes: vec![
            AttentionMode::Global,
            AttentionMode::conv1d(10)?,
            AttentionMode::conv2d(10, 0)?,
            AttentionMode::conv2d(10, 2)?,
        ],
        ..BenchSpec::default()
    };
    let results = run_bench(&spec)?;
    print!("{}", bench_csv(&results));
    println!();
    for chunk in results.chunks(spec.modes.len()) {
        let global = chunk[0].median_seconds;
        let ratios: Vec<String> = chunk[1..]
            .iter()
            .map(|r| format!("{} {:.1}x", r.mode, global / r.median_seconds))
            .collect();
        println!("I={:>5}  global / {}", chunk[0].len, ratios.join(", "));
    }
    Ok(())
}
