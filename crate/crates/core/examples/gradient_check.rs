//! Compares every differentiable operation against central finite
//! differences.
//!
//! cargo run --example gradient_check -- [seeds]

use fullpersp::learn::gradcheck::{check_all, OPS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(5);
    let mut worst = vec![0.0f64; OPS.len()];
    for seed in 0..seeds {
        for (k, c) in check_all(seed)?.into_iter().enumerate() {
            worst[k] = worst[k].max(c.max_rel_err);
        }
    }
    for (op, w) in OPS.iter().zip(&worst) {
        println!("{op:>18}  {w:.2e}");
    }
    Ok(())
}
