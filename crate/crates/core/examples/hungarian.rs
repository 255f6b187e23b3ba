//! Optimal assignment on a random cost matrix, checked against enumeration.

use fqrcnn::assignment::{brute_force_min, hungarian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fqrcnn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, cols) = (5, 4);
    let cost: Vec<f64> = (0..rows * cols).map(|_| f64::from(rng.gen_range(0..20u8))).collect();
    for r in 0..rows {
        println!("{:?}", &cost[r * cols..(r + 1) * cols]);
    }
    let a = hungarian(&cost, rows, cols)?;
    println!("rows -> cols: {:?}", a.sigma);
    println!("total {} (enumeration: {})", a.total_cost, brute_force_min(&cost, rows, cols));
    Ok(())
}
