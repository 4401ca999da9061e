//! Trains briefly, saves a checkpoint, loads it back and evaluates.
//!
//!     cargo run --release --example checkpoint

use std::io::{BufReader, BufWriter};

use csan::checkpoint::{read_checkpoint, write_checkpoint};
use csan::training::evaluate;
use csan::{generate, train, AttentionMode, EncoderConfig, TaskKind, TaskSpec, TrainConfig};

fn main() -> csan::Result<()> {
    let task = TaskSpec {
        kind: TaskKind::Copy,
        seq_len: 10,
        vocab_size: 8,
        pattern_len: None,
        n_train: 500,
        n_eval: 50,
        seed: 0,
    };
    let config = EncoderConfig::toy(8, 10, AttentionMode::conv1d(2)?)?;
    let tc = TrainConfig { max_steps: 60, eval_every: 20, ..TrainConfig::default() };
    let run = train(&config, &task, &tc)?;

    let dir = std::env::temp_dir().join("csan-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("copy.ckpt");
    write_checkpoint(BufWriter::new(std::fs::File::create(&path)?), &config, &run.params)?;
    let loaded = read_checkpoint(BufReader::new(std::fs::File::open(&path)?), &config)?;

    let eval = generate(&task)?.eval;
    let before = run.final_metrics().expect("metrics");
    let after = evaluate(&loaded, &config, &eval, before.step)?;
    println!("{} bytes at {}", std::fs::metadata(&path)?.len(), path.display());
    println!("trained: loss {} accuracy {}", before.loss, before.accuracy);
    println!("loaded:  loss {} accuracy {}", after.loss, after.accuracy);
    assert_eq!(loaded, run.params);
    Ok(())
}
