//! Input builders shared by the benchmarks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use span_core::ndarray::Array2;
use span_core::sparse::{build_sparse_map, Coord, SparseMap};

/// A `side x side` grid with `occupancy` of its cells active, random features.
pub fn random_map(side: usize, occupancy: f64, dim: usize, seed: u64) -> SparseMap<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = side * side;
    let n = ((occupancy * cells as f64).round() as usize).clamp(1, cells);
    let mut coords: Vec<Coord> =
        sample(&mut rng, cells, n).into_iter().map(|i| Coord::new((i % side) as u32, (i / side) as u32)).collect();
    coords.sort();
    let feats = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0f32..1.0));
    build_sparse_map(coords, feats, 0).expect("distinct coordinates")
}
