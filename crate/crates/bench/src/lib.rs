//! Fixtures shared by the benchmarks.

use grafit_core::rng::stream;
use grafit_core::{EmbeddingMemory, Matrix};
use rand::Rng;
use rand_distr::StandardNormal;

/// Unit-norm Gaussian rows.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, "bench", 0);
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).normalized_rows()
}

/// A memory of `n` unit rows with `classes` coarse labels, each split in
/// four fine labels.
pub fn memory(n: usize, d: usize, classes: u32) -> EmbeddingMemory {
    let coarse: Vec<u32> = (0..n as u32).map(|i| i % classes).collect();
    let fine: Vec<u32> = (0..n as u32).map(|i| (i % classes) * 4 + (i / classes) % 4).collect();
    EmbeddingMemory::new(unit_rows(n, d, 1), coarse, Some(fine)).expect("labels are consistent")
}
