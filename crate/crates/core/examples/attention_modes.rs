//! One input, three attention modes: outputs, active sets and the two
//! equivalences (wide window = global, zero head span = 1D).
//!
//!     cargo run --example attention_modes

use csan::{attend, AttentionMode, MultiHeadParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> csan::Result<()> {
    let (len, d, heads) = (8, 16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[len, d], 1.0, &mut rng);
    let params = MultiHeadParams::random(d, heads, &mut rng)?;

    let modes = [
        AttentionMode::Global,
        AttentionMode::conv1d(2)?,
        AttentionMode::conv2d(2, 2)?,
        AttentionMode::conv1d(14)?,
        AttentionMode::conv2d(2, 0)?,
    ];
    let mut outputs = Vec::new();
    for mode in modes {
        let (out, trace) = attend(&x, &params, mode)?;
        let set = trace.active_set(0, 0);
        let mid = trace.active_set(1, len / 2);
        println!(
            "{mode:<18} query (h0,i0) sees heads {:?} x positions {:?}; (h1,i{}) sees {:?} x {:?}",
            set.heads,
            set.positions,
            len / 2,
            mid.heads,
            mid.positions
        );
        outputs.push(out);
    }
    let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!();
    println!("max |conv1d(M=14) - global|     = {:e}", diff(&outputs[3], &outputs[0]));
    println!("max |conv2d(M=2,N=0) - conv1d(M=2)| = {:e}", diff(&outputs[4], &outputs[1]));
    println!("max |conv1d(M=2) - global|      = {:e}", diff(&outputs[1], &outputs[0]));
    Ok(())
}
