//! Final accuracy on LocalPattern (k = 2) as the lower layers' window grows.
//! The optional argument caps the number of training steps (default 2000).
//!
//!     cargo run --release --example window_sweep -- 500

use std::path::Path;

use csan::cli::{run_sweep, sweep_csv, ExperimentConfig, SweepAxis};

fn main() -> csan::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/local_pattern.toml");
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(steps) = std::env::args().nth(1) {
        config.train.max_steps = steps.parse().expect("step count");
    }
    let rows = run_sweep(&config, SweepAxis::WindowM, &[0, 2, 4, 6, 8], None)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
