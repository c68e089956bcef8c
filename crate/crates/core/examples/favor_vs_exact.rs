//! Causal FAVOR+ against exact causal softmax attention on random inputs,
//! for a growing number of random features.
//!
//! `cargo run --release --example favor_vs_exact`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temporal_bigen::attention::{exact_head, favor_head, RandomFeatureMap, DEFAULT_EPS};

fn main() -> temporal_bigen::Result<()> {
    let (n, d) = (64, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n * d).map(|_| rng.gen_range(lo..hi)).collect() };
    let (q, k, v) = (draw(-1.0, 1.0), draw(-1.0, 1.0), draw(0.0, 1.0));
    let exact = exact_head(&q, &k, &v, n, d, d);

    println!("{:>5} {:>12} {:>12} {:>12}", "m", "iid", "orthogonal", "max abs");
    for m in [8, 16, 32, 64, 128, 256, 512] {
        let mut row = Vec::new();
        let mut worst = 0.0f64;
        for orthogonal in [false, true] {
            let mut err = 0.0;
            // Average over a few feature draws.
            for seed in 0..8 {
                let map = RandomFeatureMap::new(m, d, seed, orthogonal)?;
                let approx = favor_head(&q, &k, &v, n, d, &map, DEFAULT_EPS);
                for (a, e) in approx.iter().zip(&exact) {
                    err += (a - e).abs() / e.abs();
                    worst = worst.max((a - e).abs());
                }
            }
            row.push(err / (8 * n * d) as f64);
        }
        println!("{m:>5} {:>12.5} {:>12.5} {worst:>12.5}", row[0], row[1]);
    }
    Ok(())
}
