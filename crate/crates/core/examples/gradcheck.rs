//! Finite-difference check of every parameter gradient of the small two-layer
//! encoder, once per attention mode.
//!
//!     cargo run --example gradcheck

use csan::cli::run_gradcheck;
use csan::{AttentionMode, EncoderConfig};

fn main() -> csan::Result<()> {
    for mode in [AttentionMode::Global, AttentionMode::conv1d(2)?, AttentionMode::conv2d(2, 2)?] {
        let config = EncoderConfig::gradcheck_toy(mode)?;
        let report = run_gradcheck(&config, 0)?;
        let (name, worst) = report
            .rows
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty report");
        println!(
            "{mode:<18} {} tensors, worst {worst:.2e} in {name}: {}",
            report.rows.len(),
            if report.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok(())
}
