//! Prints which positions and heads each query may attend to, including the
//! truncated windows at the sequence and head boundaries.
//!
//!     cargo run --example window_geometry -- 10 4

use csan::{head_window, window_positions};

fn main() -> csan::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let len = args.next().unwrap_or(10);
    let window = args.next().unwrap_or(4);
    let heads = 4;

    println!("positions, I={len}, M={window}");
    for i in 0..len {
        let w = window_positions(i, len, window)?;
        let row: String = (0..len).map(|j| if w.contains(&j) { '#' } else { '.' }).collect();
        println!("  i={i:>2}  {row}  {w:?}");
    }
    for span in [0, 2, 4] {
        println!("heads, H={heads}, N={span}");
        for h in 0..heads {
            let w = head_window(h, heads, span)?;
            let row: String = (0..heads).map(|s| if w.contains(&s) { '#' } else { '.' }).collect();
            println!("  h={h}  {row}  {w:?}");
        }
    }
    if let Err(e) = window_positions(0, len, 3) {
        println!("odd window: {e}");
    }
    Ok(())
}
