//! Fixtures shared by the benchmarks.

use hab_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense regression problem with `n` rows and `d` columns. The target is a
/// noisy piecewise function of the first three columns.
pub fn regression_problem(n: usize, d: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = data
        .chunks(d)
        .map(|r| {
            let a = r[0];
            let b = r.get(1).copied().unwrap_or(0.0);
            let c = r.get(2).copied().unwrap_or(0.0);
            3.0 * a * a + if b > 0.2 { 2.0 } else { -1.0 } + c + rng.gen_range(-0.1..0.1)
        })
        .collect();
    (Matrix::new(data, n, d).expect("sized"), y)
}
