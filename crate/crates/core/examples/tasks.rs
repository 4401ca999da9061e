//! Samples from the three synthetic tasks and the dump format.
//!
//!     cargo run --example tasks

use csan::tasks::{local_pattern_labels, write_examples};
use csan::{generate, TaskKind, TaskSpec};

fn main() -> csan::Result<()> {
    for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::LocalPattern] {
        let spec = TaskSpec {
            kind,
            seq_len: 12,
            vocab_size: 6,
            pattern_len: (kind == TaskKind::LocalPattern).then_some(2),
            n_train: 3,
            n_eval: 1,
            seed: 7,
        };
        let data = generate(&spec)?;
        match spec.pattern() {
            Some(p) => println!("{kind:?}, pattern {p:?}"),
            None => println!("{kind:?}"),
        }
        write_examples(std::io::stdout().lock(), &data.train)?;
    }
    println!("scan of [1,4,7,2] for (4,7), k=2: {:?}", local_pattern_labels(&[1, 4, 7, 2], &[4, 7], 2));
    Ok(())
}
