//! Seeded inputs shared by the benchmarks.

use rand::Rng;
use voxelfm_core::embeddings::{EmbeddingRecord, EmbeddingStore};
use voxelfm_core::rng::rng_from_seed;
use voxelfm_core::Grid3;

/// Uniform values in `[0, 1)`, i.e. an already-normalized patch.
pub fn noise_patch(side: usize, seed: u64) -> Grid3<f32> {
    let mut rng = rng_from_seed(seed);
    Grid3::from_fn([side; 3], |_, _, _| rng.random::<f32>())
}

/// `m` positive pairs of dimension `p`, standard-uniform around zero.
pub fn embedding_pairs(m: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = rng_from_seed(seed);
    let mut draw = || (0..m).map(|_| (0..p).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
    let z1 = draw();
    let z2 = draw();
    (z1, z2)
}

pub fn random_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut rng = rng_from_seed(seed);
    let records = (0..n as u64).map(|id| EmbeddingRecord {
        id,
        vector: (0..dim).map(|_| rng.random::<f32>() - 0.5).collect(),
        label: Some((id % 7) as i32),
        scan_id: id / 64,
        grid_position: None,
    });
    EmbeddingStore::from_records(dim, records).expect("ids are unique and values finite")
}
