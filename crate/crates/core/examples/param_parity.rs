//! Windowing adds no parameters: every layer-mode assignment of the toy
//! dimensions has the same count.
//!
//!     cargo run --example param_parity

use csan::encoder::hierarchical_modes;
use csan::{total_params, AttentionMode, EncoderConfig};

fn main() -> csan::Result<()> {
    for lower in [AttentionMode::Global, AttentionMode::conv1d(4)?, AttentionMode::conv2d(10, 2)?] {
        for count in 0..=4 {
            let config = EncoderConfig::new(64, 4, 128, hierarchical_modes(4, count, lower), 8, 20)?;
            println!("{count} x {lower:<18} {}", total_params(&config));
        }
    }
    let d = 512;
    let config = EncoderConfig::new(d, 8, 2048, vec![AttentionMode::Global; 6], 32_000, 256)?;
    println!("base-size 6-layer encoder, 32k vocab: {:.1}M", total_params(&config) as f64 / 1e6);
    Ok(())
}
