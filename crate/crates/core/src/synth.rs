//! Seeded synthetic stand-ins for slide datasets.
//!
//! *Classification*: every bag holds `pairs` pairs of square clusters, one
//! of marker-A tokens and one of marker-B tokens, on an irregular tissue
//! region; the label says whether the paired cluster centers lie within
//! Chebyshev distance `radius` (the default places close pairs touching,
//! far pairs well apart). Both classes
//! have identical token statistics, so pooling i.i.d. features cannot
//! separate them.
//!
//! *Segmentation*: tissue carries a few irregular blobs; each token's
//! features are a noisy indicator of blob membership.

use crate::error::{Result, SpanError};
use crate::model::Target;
use crate::scalar::Scalar;
use crate::sparse::{build_sparse_map, Coord, SparseMap};
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub num_maps: usize,
    /// Side of the square grid tissue is drawn on.
    pub extent: u32,
    /// Accepted token count range for blob-shaped tissue.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// When set, tissue is one axis-aligned rectangle covering this
    /// fraction of the grid (1.0 gives the full grid).
    pub occupancy: Option<f64>,
    pub feature_dim: usize,
    /// Side of each square marker cluster (odd).
    pub cluster: u32,
    /// Marker pairs per bag.
    pub pairs: usize,
    /// Close-pair threshold on center distance (classification).
    pub radius: u32,
    /// Far pairs are at least `radius + margin` apart.
    pub margin: u32,
    /// Blob count range (segmentation).
    pub blobs: (usize, usize),
    /// Radius range, in grid cells, of the discs that make up a blob.
    pub blob_radius: (f64, f64),
    /// Mean shift of informative features.
    pub signal: f64,
    /// Standard deviation of the per-feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classification,
            num_maps: 2000,
            extent: 32,
            min_tokens: 200,
            max_tokens: 600,
            occupancy: None,
            feature_dim: 8,
            cluster: 5,
            pairs: 2,
            radius: 5,
            margin: 6,
            blobs: (4, 8),
            blob_radius: (1.0, 2.5),
            signal: 2.0,
            noise: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub map: SparseMap<T>,
    pub target: Target,
}

impl<T: Scalar> Sample<T> {
    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample { map: self.map.cast(), target: self.target.clone() }
    }

    pub fn class(&self) -> Option<usize> {
        match self.target {
            Target::Class(c) => Some(c),
            _ => None,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SpanError::InvalidConfig(m.into()));
        if self.extent < 4 || self.feature_dim < 2 {
            return bad("extent must be >= 4 and feature_dim >= 2");
        }
        if self.min_tokens > self.max_tokens {
            return bad("min_tokens exceeds max_tokens");
        }
        if let Some(f) = self.occupancy {
            if !(f > 0.0 && f <= 1.0) {
                return bad("occupancy must be in (0, 1]");
            }
        }
        if self.cluster.is_multiple_of(2) || self.pairs == 0 {
            return bad("cluster side must be odd and pairs >= 1");
        }
        if self.kind == TaskKind::Classification && self.radius < self.cluster {
            return bad("radius must be >= cluster side so marker clusters do not overlap");
        }
        if self.noise < 0.0 || self.blobs.0 > self.blobs.1 {
            return bad("noise must be >= 0 and blob range ordered");
        }
        if !(self.blob_radius.0 > 0.0 && self.blob_radius.0 <= self.blob_radius.1) {
            return bad("blob radius range must be positive and ordered");
        }
        Ok(())
    }
}

fn chebyshev(a: Coord, b: Coord) -> u32 {
    a.x.abs_diff(b.x).max(a.y.abs_diff(b.y))
}

/// Union of random discs, or a rectangle when `occupancy` is set.
fn tissue<R: Rng>(spec: &SyntheticTaskSpec, rng: &mut R) -> Result<BTreeSet<Coord>> {
    let e = spec.extent;
    if let Some(f) = spec.occupancy {
        let area = (f * (e * e) as f64).round().max(1.0);
        let w = ((area.sqrt()).round() as u32).clamp(1, e);
        let h = ((area / w as f64).round() as u32).clamp(1, e);
        let x0 = rng.random_range(0..=e - w);
        let y0 = rng.random_range(0..=e - h);
        return Ok((y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| Coord::new(x, y))).collect());
    }
    for _ in 0..1000 {
        let discs = rng.random_range(2..=4);
        let mut cells = BTreeSet::new();
        for _ in 0..discs {
            let cx = rng.random_range(0.0..e as f64);
            let cy = rng.random_range(0.0..e as f64);
            let r = rng.random_range(e as f64 * 0.15..e as f64 * 0.35);
            for y in 0..e {
                for x in 0..e {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        cells.insert(Coord::new(x, y));
                    }
                }
            }
        }
        if (spec.min_tokens..=spec.max_tokens).contains(&cells.len()) {
            return Ok(cells);
        }
    }
    Err(SpanError::InvalidConfig("could not draw tissue within the token range".into()))
}

fn block(c: Coord, side: u32) -> impl Iterator<Item = Coord> {
    let h = side / 2;
    (0..side).flat_map(move |dy| (0..side).map(move |dx| Coord::new(c.x + dx - h, c.y + dy - h)))
}

fn cluster_centers(cells: &BTreeSet<Coord>, side: u32) -> Vec<Coord> {
    let h = side / 2;
    cells
        .iter()
        .copied()
        .filter(|c| c.x >= h && c.y >= h && block(*c, side).all(|q| cells.contains(&q)))
        .collect()
}

fn noise_features<R: Rng>(n: usize, d: usize, sigma: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, sigma.max(1e-12)).expect("finite sigma");
    Array2::from_shape_fn((n, d), |_| if sigma == 0.0 { 0.0 } else { normal.sample(rng) })
}

fn place_pairs<R: Rng>(spec: &SyntheticTaskSpec, label: usize, centers: &[Coord], rng: &mut R) -> Option<Vec<(Coord, usize)>> {
    let far = spec.radius + spec.margin;
    let mut placed: Vec<Coord> = Vec::new();
    let mut marks = Vec::new();
    for _ in 0..spec.pairs {
        let free: Vec<Coord> = centers.iter().copied().filter(|c| placed.iter().all(|p| chebyshev(*p, *c) >= far)).collect();
        let &a = free.choose(rng)?;
        let partners: Vec<Coord> = free
            .iter()
            .copied()
            .filter(|b| {
                let d = chebyshev(a, *b);
                if label == 1 {
                    (spec.cluster..=spec.radius).contains(&d)
                } else {
                    d >= far
                }
            })
            .collect();
        let &b = partners.choose(rng)?;
        placed.extend([a, b]);
        marks.extend([(a, 0), (b, 1)]);
    }
    Some(marks)
}

fn classification_bag<R: Rng>(spec: &SyntheticTaskSpec, label: usize, rng: &mut R) -> Result<Sample<f64>> {
    for _ in 0..200 {
        let cells = tissue(spec, rng)?;
        let centers = cluster_centers(&cells, spec.cluster);
        // Only tissue that admits both labels is kept, so its size and shape
        // carry no label information.
        let Some(marks) = place_pairs(spec, label, &centers, rng) else { continue };
        if place_pairs(spec, 1 - label, &centers, rng).is_none() {
            continue;
        }
        let coords: Vec<Coord> = cells.into_iter().collect();
        let mut feats = noise_features(coords.len(), spec.feature_dim, spec.noise, rng);
        for (center, dim) in marks {
            for q in block(center, spec.cluster) {
                let i = coords.binary_search(&q).expect("cluster inside tissue");
                feats[[i, dim]] += spec.signal;
            }
        }
        return Ok(Sample { map: build_sparse_map(coords, feats, 0)?, target: Target::Class(label) });
    }
    Err(SpanError::InvalidConfig(format!(
        "could not place label-{label} marker pairs; enlarge the tissue or shrink the radius"
    )))
}

fn segmentation_map<R: Rng>(spec: &SyntheticTaskSpec, rng: &mut R) -> Result<Sample<f64>> {
    let cells = tissue(spec, rng)?;
    let coords: Vec<Coord> = cells.iter().copied().collect();
    let nb = rng.random_range(spec.blobs.0..=spec.blobs.1);
    let mut fg = vec![false; coords.len()];
    for _ in 0..nb {
        let seed = coords[rng.random_range(0..coords.len())];
        // a lumpy blob: union of a few nearby discs
        let lumps = rng.random_range(1..=3);
        for _ in 0..lumps {
            let cx = seed.x as f64 + rng.random_range(-2.0..2.0);
            let cy = seed.y as f64 + rng.random_range(-2.0..2.0);
            let r = rng.random_range(spec.blob_radius.0..=spec.blob_radius.1);
            for (i, c) in coords.iter().enumerate() {
                let (dx, dy) = (c.x as f64 - cx, c.y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    fg[i] = true;
                }
            }
        }
    }
    let mut feats = noise_features(coords.len(), spec.feature_dim, spec.noise, rng);
    let half = spec.feature_dim / 2;
    for (i, &f) in fg.iter().enumerate() {
        let s = if f { spec.signal } else { -spec.signal };
        for j in 0..half {
            feats[[i, j]] += s;
        }
    }
    let mask = fg.iter().map(|&f| f as usize).collect();
    Ok(Sample { map: build_sparse_map(coords, feats, 0)?, target: Target::Mask(mask) })
}

/// Generates `num_maps` samples. Classification labels alternate, so the
/// classes are balanced exactly.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Vec<Sample<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.num_maps)
        .map(|i| match spec.kind {
            TaskKind::Classification => classification_bag(spec, i % 2, &mut rng),
            TaskKind::Segmentation => segmentation_map(spec, &mut rng),
        })
        .collect()
}

/// Train, validation and test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

/// Deterministic shuffled split by fractions `(train, val)`; the rest is test.
pub fn split<T: Clone>(mut samples: Vec<T>, train: f64, val: f64, seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n = samples.len();
    let n_train = (n as f64 * train).round() as usize;
    let n_val = ((n as f64 * val).round() as usize).min(n - n_train);
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    (samples, val, test)
}

pub fn generate_splits(spec: &SyntheticTaskSpec) -> Result<Splits<f64>> {
    let (train, val, test) = split(generate(spec)?, 0.7, 0.15, spec.seed);
    Ok(Splits { train, val, test })
}
