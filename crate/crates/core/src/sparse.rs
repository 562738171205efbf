//! Sparse 2-D maps: coordinates, features and context-token state.

use crate::error::{Result, SpanError};
use crate::scalar::Scalar;
use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Grid position in units of one patch step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub x: u32,
    pub y: u32,
}

impl Coord {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

// Row-major: y first, then x.
impl Ord for Coord {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Coord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl From<(u32, u32)> for Coord {
    fn from((x, y): (u32, u32)) -> Self {
        Self { x, y }
    }
}

/// Canonical sparse map.
///
/// `coords` is duplicate-free and row-major sorted; row `i` of `features`
/// belongs to `coords[i]`. `context` holds the global context tokens and may
/// have zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap<T> {
    coords: Vec<Coord>,
    features: Array2<T>,
    context: Array2<T>,
}

impl<T: Scalar> SparseMap<T> {
    /// Wraps parts that are already canonical. Callers inside the crate use
    /// this for rulebook outputs whose coordinates are sorted by construction.
    pub(crate) fn from_canonical(coords: Vec<Coord>, features: Array2<T>, context: Array2<T>) -> Self {
        debug_assert_eq!(coords.len(), features.nrows());
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(context.nrows() == 0 || context.ncols() == features.ncols());
        Self { coords, features, context }
    }

    /// Builds a map from already-canonical parts, validating every invariant.
    pub fn try_from_parts(coords: Vec<Coord>, features: Array2<T>, context: Array2<T>) -> Result<Self> {
        if coords.len() != features.nrows() {
            return Err(SpanError::DimensionMismatch(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                features.nrows()
            )));
        }
        if context.nrows() > 0 && context.ncols() != features.ncols() {
            return Err(SpanError::DimensionMismatch(format!(
                "context width {} differs from feature width {}",
                context.ncols(),
                features.ncols()
            )));
        }
        for w in coords.windows(2) {
            match w[0].cmp(&w[1]) {
                Ordering::Less => {}
                Ordering::Equal => return Err(SpanError::DuplicateCoordinate(w[0])),
                Ordering::Greater => {
                    return Err(SpanError::MalformedStream("coordinates are not in row-major order".into()))
                }
            }
        }
        Ok(Self { coords, features, context })
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn context(&self) -> &Array2<T> {
        &self.context
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_ctx(&self) -> usize {
        self.context.nrows()
    }

    /// Patch rows followed by context rows, `(N + num_ctx) x d`.
    pub fn stacked(&self) -> Array2<T> {
        ndarray::concatenate(Axis(0), &[self.features.view(), self.context.view()])
            .expect("feature and context widths agree")
    }

    /// Inverse of [`SparseMap::stacked`] for the given coordinates.
    pub fn from_stacked(coords: Vec<Coord>, stacked: ArrayView2<T>) -> Result<Self> {
        let n = coords.len();
        if stacked.nrows() < n {
            return Err(SpanError::DimensionMismatch(format!(
                "stacked matrix has {} rows for {} coordinates",
                stacked.nrows(),
                n
            )));
        }
        let features = stacked.slice(s![..n, ..]).to_owned();
        let context = stacked.slice(s![n.., ..]).to_owned();
        Self::try_from_parts(coords, features, context)
    }

    pub fn with_context(mut self, context: Array2<T>) -> Result<Self> {
        if context.nrows() > 0 && context.ncols() != self.feature_dim() {
            return Err(SpanError::DimensionMismatch("context width".into()));
        }
        self.context = context;
        Ok(self)
    }

    /// Converts element precision (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> SparseMap<U> {
        SparseMap {
            coords: self.coords.clone(),
            features: self.features.mapv(|v| U::lit(v.as_f64())),
            context: self.context.mapv(|v| U::lit(v.as_f64())),
        }
    }

    /// Index of `c` in the canonical order, if present.
    pub fn index_of(&self, c: Coord) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }

    pub fn into_parts(self) -> (Vec<Coord>, Array2<T>, Array2<T>) {
        (self.coords, self.features, self.context)
    }
}

/// Sorts `coords` row-major, permutes `features` to match and attaches a
/// zero-initialized `num_ctx x d` context block.
pub fn build_sparse_map<T: Scalar>(coords: Vec<Coord>, features: Array2<T>, num_ctx: usize) -> Result<SparseMap<T>> {
    if coords.len() != features.nrows() {
        return Err(SpanError::DimensionMismatch(format!(
            "{} coordinates but {} feature rows",
            coords.len(),
            features.nrows()
        )));
    }
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| coords[i]);
    for w in order.windows(2) {
        if coords[w[0]] == coords[w[1]] {
            return Err(SpanError::DuplicateCoordinate(coords[w[0]]));
        }
    }
    let sorted: Vec<Coord> = order.iter().map(|&i| coords[i]).collect();
    let permuted = features.select(Axis(0), &order);
    let d = features.ncols();
    Ok(SparseMap::from_canonical(sorted, permuted, Array2::zeros((num_ctx, d))))
}

/// Dense grid of 1-based token ids (0 = empty) over the bounding box
/// `[0, max_y] x [0, max_x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseIndexGrid {
    height: usize,
    width: usize,
    cells: Vec<u32>,
}

impl DenseIndexGrid {
    pub fn from_coords(coords: &[Coord]) -> Result<Self> {
        if coords.is_empty() {
            return Err(SpanError::EmptyMap);
        }
        let width = coords.iter().map(|c| c.x).max().unwrap_or(0) as usize + 1;
        let height = coords.iter().map(|c| c.y).max().unwrap_or(0) as usize + 1;
        let mut cells = vec![0u32; width * height];
        for (i, c) in coords.iter().enumerate() {
            cells[c.y as usize * width + c.x as usize] = i as u32 + 1;
        }
        Ok(Self { height, width, cells })
    }

    /// `(height, width)`.
    pub fn bounds(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.cells[y * self.width + x]
    }

    /// Row-major cell values.
    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|&&v| v != 0).count()
    }
}

pub fn densify_index_grid<T: Scalar>(map: &SparseMap<T>) -> Result<DenseIndexGrid> {
    DenseIndexGrid::from_coords(map.coords())
}

/// Axis-aligned pixel rectangle `(start_x, start_y, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub start_x: u32,
    pub start_y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(start_x: u32, start_y: u32, w: u32, h: u32) -> Self {
        Self { start_x, start_y, w, h }
    }
}

/// Snaps the rectangle origin down to the step grid, growing the extent by
/// the removed remainder so the far edges stay put.
pub fn align_rect(r: Rect, step: u32) -> Rect {
    assert!(step > 0, "step must be positive");
    let rx = r.start_x % step;
    let ry = r.start_y % step;
    Rect {
        start_x: r.start_x - rx,
        start_y: r.start_y - ry,
        w: r.w + rx,
        h: r.h + ry,
    }
}

/// Grid coordinates of every full `step x step` tile inside an aligned rect.
pub fn patchify_rect(r: Rect, step: u32) -> Result<Vec<Coord>> {
    assert!(step > 0, "step must be positive");
    if !r.start_x.is_multiple_of(step) || !r.start_y.is_multiple_of(step) {
        return Err(SpanError::Misaligned { x: r.start_x, y: r.start_y, step });
    }
    let (x0, y0) = (r.start_x / step, r.start_y / step);
    let (nx, ny) = (r.w / step, r.h / step);
    let mut out = Vec::with_capacity((nx * ny) as usize);
    for j in 0..ny {
        for i in 0..nx {
            out.push(Coord::new(x0 + i, y0 + j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn c(x: u32, y: u32) -> Coord {
        Coord::new(x, y)
    }

    #[test]
    fn build_sorts_row_major() {
        let m = build_sparse_map(vec![c(1, 0), c(0, 0)], array![[2.0f32], [1.0]], 0).unwrap();
        assert_eq!(m.coords(), &[c(0, 0), c(1, 0)]);
        assert_eq!(m.features(), &array![[1.0f32], [2.0]]);
    }

    #[test]
    fn build_rejects_duplicates() {
        let err = build_sparse_map(vec![c(0, 0), c(0, 0)], array![[1.0f32], [2.0]], 0).unwrap_err();
        assert_eq!(err, SpanError::DuplicateCoordinate(c(0, 0)));
    }

    #[test]
    fn build_rejects_length_mismatch() {
        let err = build_sparse_map(vec![c(0, 0)], array![[1.0f32], [2.0]], 0).unwrap_err();
        assert!(matches!(err, SpanError::DimensionMismatch(_)));
    }

    #[test]
    fn build_zero_context() {
        let m = build_sparse_map(vec![c(5, 3)], array![[7.0f32, 8.0]], 1).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.feature_dim(), 2);
        assert_eq!(m.context(), &array![[0.0f32, 0.0]]);
    }

    #[test]
    fn densify_single() {
        let m = build_sparse_map(vec![c(5, 3)], array![[1.0f32]], 0).unwrap();
        let g = densify_index_grid(&m).unwrap();
        assert_eq!(g.bounds(), (4, 6));
        assert_eq!(g.get(3, 5), 1);
        assert_eq!(g.occupied(), 1);
    }

    #[test]
    fn densify_row_and_column() {
        let m = build_sparse_map(vec![c(0, 0), c(1, 0)], Array2::<f32>::zeros((2, 1)), 0).unwrap();
        let g = densify_index_grid(&m).unwrap();
        assert_eq!(g.bounds(), (1, 2));
        assert_eq!(g.cells(), &[1, 2]);

        let m = build_sparse_map(vec![c(0, 0), c(0, 2)], Array2::<f32>::zeros((2, 1)), 0).unwrap();
        let g = densify_index_grid(&m).unwrap();
        // brute-force scatter of 1-based ids into the bounding box
        let mut expect = vec![0u32; 3];
        for (i, cc) in m.coords().iter().enumerate() {
            expect[cc.y as usize] = i as u32 + 1;
        }
        assert_eq!(g.bounds(), (3, 1));
        assert_eq!(g.cells(), expect.as_slice());
    }

    #[test]
    fn densify_empty_fails() {
        let m = build_sparse_map(vec![], Array2::<f32>::zeros((0, 1)), 0).unwrap();
        assert_eq!(densify_index_grid(&m).unwrap_err(), SpanError::EmptyMap);
    }

    #[test]
    fn align_traces() {
        assert_eq!(align_rect(Rect::new(300, 450, 500, 500), 224), Rect::new(224, 448, 576, 502));
        assert_eq!(align_rect(Rect::new(0, 0, 224, 224), 224), Rect::new(0, 0, 224, 224));
        assert_eq!(align_rect(Rect::new(223, 1, 1, 1), 224), Rect::new(0, 0, 224, 2));
    }

    fn brute_tiles(r: Rect, step: u32) -> Vec<Coord> {
        let mut out = Vec::new();
        let mut ty = 0;
        while ty * step + step <= r.h {
            let mut tx = 0;
            while tx * step + step <= r.w {
                out.push(c(r.start_x / step + tx, r.start_y / step + ty));
                tx += 1;
            }
            ty += 1;
        }
        out.sort();
        out
    }

    #[test]
    fn patchify_examples() {
        assert_eq!(patchify_rect(Rect::new(0, 0, 448, 224), 224).unwrap(), vec![c(0, 0), c(1, 0)]);
        let r = Rect::new(224, 448, 576, 502);
        let tiles = patchify_rect(r, 224).unwrap();
        assert_eq!(tiles, brute_tiles(r, 224));
        // 576 px holds two full columns, 502 px two full rows
        assert_eq!(tiles, vec![c(1, 2), c(2, 2), c(1, 3), c(2, 3)]);
        assert!(patchify_rect(Rect::new(0, 0, 100, 100), 224).unwrap().is_empty());
    }

    #[test]
    fn patchify_misaligned() {
        assert!(matches!(
            patchify_rect(Rect::new(5, 0, 448, 224), 224),
            Err(SpanError::Misaligned { .. })
        ));
    }

    fn coord_set() -> impl Strategy<Value = Vec<Coord>> {
        proptest::collection::hash_set((0u32..40, 0u32..40), 1..60)
            .prop_map(|s| s.into_iter().map(Coord::from).collect())
    }

    proptest! {
        #[test]
        fn canonicalization_is_idempotent(coords in coord_set()) {
            let n = coords.len();
            let feats = Array2::from_shape_fn((n, 2), |(i, j)| (i * 3 + j) as f32);
            let m = build_sparse_map(coords, feats, 1).unwrap();
            let again = build_sparse_map(m.coords().to_vec(), m.features().clone(), 1).unwrap();
            prop_assert_eq!(&m, &again);
        }

        #[test]
        fn densify_recollects_coords(coords in coord_set()) {
            let n = coords.len();
            let m = build_sparse_map(coords, Array2::<f32>::zeros((n, 1)), 0).unwrap();
            let g = densify_index_grid(&m).unwrap();
            let (h, w) = g.bounds();
            let mut back = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let v = g.get(y, x);
                    if v != 0 {
                        prop_assert_eq!(m.coords()[v as usize - 1], c(x as u32, y as u32));
                        back.push(c(x as u32, y as u32));
                    }
                }
            }
            prop_assert_eq!(back.as_slice(), m.coords());
        }

        #[test]
        fn align_is_idempotent_and_keeps_far_edges(
            x in 0u32..5000, y in 0u32..5000, w in 1u32..3000, h in 1u32..3000, step in 1u32..600
        ) {
            let r = Rect::new(x, y, w, h);
            let a = align_rect(r, step);
            prop_assert_eq!(align_rect(a, step), a);
            prop_assert_eq!(a.start_x + a.w, r.start_x + r.w);
            prop_assert_eq!(a.start_y + a.h, r.start_y + r.h);
            prop_assert_eq!(a.start_x % step, 0);
        }
    }
}
