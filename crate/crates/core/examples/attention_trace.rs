//! Runs a freshly initialized toy encoder with 2D windows in the lower layers
//! and writes every layer's attention weights as CSV.
//!
//!     cargo run --example attention_trace -- trace.csv

use csan::cli::trace_csv;
use csan::{encode_with_traces, AttentionMode, EncoderConfig, EncoderParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> csan::Result<()> {
    let config = EncoderConfig::toy(8, 12, AttentionMode::conv2d(4, 2)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = EncoderParams::init(&config, &mut rng)?;
    let tokens: Vec<usize> = (0..12).map(|_| rng.gen_range(0..8)).collect();
    let (_, traces) = encode_with_traces(&tokens, &params, &config)?;

    // query head 1, position 5 of the first layer: a 3-head x 5-position block
    let t = &traces[0];
    let set = t.active_set(1, 5);
    println!("layer 0, query (h1, i5): heads {:?}, positions {:?}", set.heads, set.positions);
    for s in 0..t.heads() {
        let row: Vec<String> = (0..t.len()).map(|j| format!("{:.2}", t.weight(1, 5, s, j))).collect();
        println!("  key head {s}: {}", row.join(" "));
    }

    let csv = trace_csv(&traces);
    match std::env::args().nth(1) {
        Some(path) => {
            std::fs::write(&path, &csv)?;
            println!("wrote {} rows to {path}", csv.lines().count() - 1);
        }
        None => println!("{} trace rows (pass a path to save them)", csv.lines().count() - 1),
    }
    Ok(())
}
