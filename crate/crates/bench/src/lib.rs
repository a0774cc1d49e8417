//! Fixtures shared by the benchmarks in `benches/`.

use ncart_core::{Dataset, Labels, Matrix, Schema, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Binary task whose label is the sign of the first two features' sum.
pub fn synthetic_binclass(rows: usize, features: usize, seed: u64) -> Dataset {
    let x = random_matrix(rows, features, seed);
    let codes = (0..rows).map(|r| (x[(r, 0)] + x[(r, 1)] > 0.0) as usize).collect();
    Dataset::from_parts(
        x,
        Labels::Classes {
            codes,
            names: vec!["0".into(), "1".into()],
        },
        Schema {
            features: (0..features).map(|j| format!("x{j}")).collect(),
            target: "y".into(),
            categorical: vec![],
            task: Task::Binclass,
        },
    )
    .expect("synthetic data is well formed")
}
