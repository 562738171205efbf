//! Occupancy sweep comparing the sparse convolution with the dense
//! reference on the same random layouts.

use crate::conv::{build_conv_rulebook, sac_forward, ConvParams, ConvSpec};
use crate::error::Result;
use crate::oracles::{dense_conv_oracle, DenseTensor};
use crate::sparse::{build_sparse_map, Coord};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub occupancies: Vec<f64>,
    /// Square grid sides.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: u32,
    pub stride: u32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            occupancies: vec![0.05, 0.25, 0.5, 1.0],
            sizes: vec![64, 128],
            repeats: 5,
            in_dim: 16,
            out_dim: 16,
            kernel: 2,
            stride: 2,
            seed: 0,
        }
    }
}

/// One CSV row. Times are medians over the repeats. Byte counts are the
/// sizes of the buffers each path holds at its peak: input features,
/// rulebook and output for the sparse path; dense input and output grids
/// for the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub occupancy: f64,
    pub size: usize,
    pub n: usize,
    pub rulebook_ms: f64,
    pub sparse_ms: f64,
    pub dense_ms: f64,
    pub sparse_peak_bytes: usize,
    pub dense_peak_bytes: usize,
    /// Largest difference between the two outputs at active sites.
    pub max_abs_diff: f64,
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run_point(cfg: &BenchConfig, occupancy: f64, size: usize, rng: &mut ChaCha8Rng) -> Result<BenchRow> {
    let cells = size * size;
    let n = ((occupancy * cells as f64).round() as usize).clamp(1, cells);
    let mut coords: Vec<Coord> = sample(rng, cells, n)
        .into_iter()
        .map(|i| Coord::new((i % size) as u32, (i / size) as u32))
        .collect();
    coords.sort();
    let feats = Array2::from_shape_fn((n, cfg.in_dim), |_| rng.random_range(-1.0f32..1.0));
    let map = build_sparse_map(coords, feats, 0)?;
    let spec = ConvSpec::new(cfg.kernel, cfg.stride, 1, cfg.in_dim, cfg.out_dim)?;
    let params = ConvParams::<f32>::random(spec.kernel_volume(), cfg.in_dim, cfg.out_dim, rng);
    let dense_in = DenseTensor::from_map(&map, size, size)?;

    let (mut t_rb, mut t_sp, mut t_de) = (Vec::new(), Vec::new(), Vec::new());
    let mut last = None;
    for _ in 0..cfg.repeats.max(1) {
        let t = Instant::now();
        let rb = build_conv_rulebook(map.coords(), &spec)?;
        t_rb.push(ms(t));
        let t = Instant::now();
        let out = sac_forward(&map, &rb, &params)?;
        t_sp.push(ms(t));
        let t = Instant::now();
        let dense = dense_conv_oracle(&dense_in, &spec, &params)?;
        t_de.push(ms(t));
        last = Some((rb, out, dense));
    }
    let (rb, out, dense) = last.expect("at least one repeat");
    let mut diff = 0.0f64;
    let (oh, ow) = (dense.dim().0, dense.dim().1);
    for (c, row) in out.coords().iter().zip(out.features().rows()) {
        if (c.y as usize) < oh && (c.x as usize) < ow {
            for (j, v) in row.iter().enumerate() {
                diff = diff.max((v - dense[[c.y as usize, c.x as usize, j]]).abs() as f64);
            }
        }
    }
    let f = std::mem::size_of::<f32>();
    Ok(BenchRow {
        occupancy,
        size,
        n,
        rulebook_ms: median(t_rb),
        sparse_ms: median(t_sp),
        dense_ms: median(t_de),
        sparse_peak_bytes: map.features().len() * f + rb.heap_bytes() + out.features().len() * f,
        dense_peak_bytes: dense_in.value_bytes() + dense.len() * f,
        max_abs_diff: diff,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        for &occ in &cfg.occupancies {
            rows.push(run_point(cfg, occ, size, &mut rng)?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_not_mean() {
        assert_eq!(median(vec![1.0, 100.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn dense_grid_outputs_agree() {
        let cfg = BenchConfig { occupancies: vec![1.0], sizes: vec![16], repeats: 1, ..Default::default() };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows[0].n, 256);
        assert!(rows[0].max_abs_diff < 1e-5);
    }

    #[test]
    fn sparse_is_cheaper_at_low_occupancy() {
        let cfg = BenchConfig { occupancies: vec![0.05], sizes: vec![64], repeats: 3, ..Default::default() };
        let r = &run_bench(&cfg).unwrap()[0];
        assert!(r.sparse_peak_bytes < r.dense_peak_bytes);
        assert!(r.sparse_ms < r.dense_ms, "{r:?}");
    }
}
