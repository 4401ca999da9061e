use std::path::Path;

use csan::cli::{metrics_csv, ExperimentConfig};
use csan::training::{evaluate, init_params};
use csan::{generate, train, OptimizerKind, TrainConfig};

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn copy_is_learned_within_budget() {
    // first run hit 100% eval accuracy at step 50; budget frozen at 100 steps
    let mut c = config("copy.toml");
    c.train.max_steps = 100;
    let run = train(&c.model, c.task().unwrap(), &c.train).unwrap();
    let last = run.final_metrics().unwrap();
    assert_eq!(last.step, 100);
    assert!(last.accuracy >= 0.99, "{last:?}");
}

#[test]
fn untrained_model_accuracy_is_frozen() {
    let c = config("local_pattern.toml");
    let data = generate(c.task().unwrap()).unwrap();
    let params = init_params(&c.model, 0).unwrap();
    let m = evaluate(&params, &c.model, &data.eval, 0).unwrap();
    assert_eq!(m.accuracy, 0.0302);
    assert_eq!(m.loss.to_bits(), 4613885565863720219);
}

fn short(mut c: ExperimentConfig) -> ExperimentConfig {
    let task = c.task.as_mut().unwrap();
    task.n_train = 64;
    task.n_eval = 16;
    c.train.max_steps = 12;
    c.train.eval_every = 5;
    c.train.batch_size = 4;
    c
}

#[test]
fn same_seeds_same_history() {
    let c = short(config("local_pattern.toml"));
    let a = train(&c.model, c.task().unwrap(), &c.train).unwrap();
    let b = train(&c.model, c.task().unwrap(), &c.train).unwrap();
    assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
    assert_eq!(a.params, b.params);
    assert_eq!(a.history.iter().map(|m| m.step).collect::<Vec<_>>(), [5, 10, 12]);

    let mut other = c.clone();
    other.train.seed = 1;
    let d = train(&other.model, other.task().unwrap(), &other.train).unwrap();
    assert_ne!(metrics_csv(&a.history), metrics_csv(&d.history));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut c = short(config("copy.toml"));
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::adam()] {
        c.train = TrainConfig { learning_rate: 0.0, optimizer, ..c.train.clone() };
        let run = train(&c.model, c.task().unwrap(), &c.train).unwrap();
        assert_eq!(run.params, init_params(&c.model, c.train.seed).unwrap());
        let first = &run.history[0];
        assert!(run.history.iter().all(|m| m.loss == first.loss && m.accuracy == first.accuracy));
    }
}

#[test]
fn metrics_stay_in_range() {
    let c = short(config("reverse.toml"));
    let run = train(&c.model, c.task().unwrap(), &c.train).unwrap();
    for m in &run.history {
        assert!(m.loss >= 0.0 && (0.0..=1.0).contains(&m.accuracy));
    }
}
