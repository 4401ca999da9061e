//! Trains the toy encoder (Conv1D M=4 in the two lower layers) on LocalPattern
//! with k = 2 and prints the evaluation curve. Pass `global` to train the
//! all-global variant instead.
//!
//!     cargo run --release --example train_local_pattern

use std::path::Path;
use std::time::Instant;

use csan::cli::ExperimentConfig;
use csan::train_with;

fn main() -> csan::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/local_pattern.toml");
    let mut config = ExperimentConfig::load(&path)?;
    if std::env::args().nth(1).as_deref() == Some("global") {
        config.model = config.model.all_global();
    }
    let modes: Vec<String> = config.model.layer_modes.iter().map(|m| m.to_string()).collect();
    println!("layers: {}", modes.join(" / "));

    let start = Instant::now();
    let run = train_with(&config.model, config.task()?, &config.train, |m| {
        println!("step {:>5}  loss {:.5}  accuracy {:.4}", m.step, m.loss, m.accuracy);
    })?;
    let last = run.final_metrics().expect("at least one evaluation");
    println!(
        "final accuracy {:.4} after {} steps in {:.1}s",
        last.accuracy,
        last.step,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
