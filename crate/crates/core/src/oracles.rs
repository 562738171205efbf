//! Slow reference implementations. Nothing here calls into the fast paths;
//! indices are recomputed from coordinates with their own arithmetic.

use crate::attention::{AttnParams, Shift};
use crate::conv::{ConvParams, ConvSpec};
use crate::error::{Result, SpanError};
use crate::scalar::Scalar;
use crate::sparse::{Coord, SparseMap};
use ndarray::{Array2, Array3};
use std::collections::BTreeSet;

/// Largest input the brute-force builders accept.
pub const BRUTE_FORCE_LIMIT: usize = 500;

/// `H x W x d` embedding of a sparse map, zero at inactive sites.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    pub data: Array3<T>,
    pub active: Array2<bool>,
}

impl<T: Scalar> DenseTensor<T> {
    /// Embeds into a `height x width` grid, which must contain every coordinate.
    pub fn from_map(map: &SparseMap<T>, height: usize, width: usize) -> Result<Self> {
        let d = map.feature_dim();
        let mut data = Array3::zeros((height, width, d));
        let mut active = Array2::from_elem((height, width), false);
        for (c, row) in map.coords().iter().zip(map.features().rows()) {
            let (y, x) = (c.y as usize, c.x as usize);
            if y >= height || x >= width {
                return Err(SpanError::DimensionMismatch(format!(
                    "coordinate ({x}, {y}) outside a {height}x{width} grid"
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                data[[y, x, j]] = v;
            }
            active[[y, x]] = true;
        }
        Ok(Self { data, active })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Bytes held by the value array.
    pub fn value_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }
}

/// Output side length of a valid-padding convolution.
pub fn dense_output_size(len: usize, kernel: u32, stride: u32, dilation: u32) -> Result<usize> {
    let reach = (kernel as usize - 1) * dilation as usize + 1;
    if len < reach {
        return Err(SpanError::NonPositiveOutputSize);
    }
    Ok((len - reach) / stride as usize + 1)
}

/// Textbook strided, dilated convolution with valid padding. The weight
/// block for offset `(kx, ky)` is `params.weight` rows
/// `(ky*K + kx)*d_out .. +d_out`.
pub fn dense_conv_oracle<T: Scalar>(
    input: &DenseTensor<T>,
    spec: &ConvSpec,
    params: &ConvParams<T>,
) -> Result<Array3<T>> {
    let (k, s, dil) = (spec.kernel as usize, spec.stride as usize, spec.dilation as usize);
    let d_in = input.channels();
    let d_out = params.bias.len();
    if params.weight.dim() != (k * k * d_out, d_in) {
        return Err(SpanError::DimensionMismatch(format!(
            "weight {:?} for K={k}, d_in={d_in}, d_out={d_out}",
            params.weight.dim()
        )));
    }
    let oh = dense_output_size(input.height(), spec.kernel, spec.stride, spec.dilation)?;
    let ow = dense_output_size(input.width(), spec.kernel, spec.stride, spec.dilation)?;
    let mut out = Array3::zeros((oh, ow, d_out));
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..d_out {
                let mut acc = params.bias[o];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = oy * s + ky * dil;
                        let ix = ox * s + kx * dil;
                        let wrow = (ky * k + kx) * d_out + o;
                        for c in 0..d_in {
                            acc += params.weight[[wrow, c]] * input.data[[iy, ix, c]];
                        }
                    }
                }
                out[[oy, ox, o]] = acc;
            }
        }
    }
    Ok(out)
}

/// Boolean `(N+C) x (N+C)` masks from explicit pair lists.
pub fn attention_masks(rows: usize, local: &BTreeSet<(u32, u32)>, global: &BTreeSet<(u32, u32)>) -> (Array2<bool>, Array2<bool>) {
    let mut ml = Array2::from_elem((rows, rows), false);
    let mut mg = Array2::from_elem((rows, rows), false);
    for &(i, j) in local {
        ml[[i as usize, j as usize]] = true;
    }
    for &(i, j) in global {
        mg[[i as usize, j as usize]] = true;
    }
    (ml, mg)
}

/// Dense masked multi-head attention. `coords` gives positions of the first
/// `N` rows; the remaining rows are context tokens. The bias table is read
/// at unmasked local entries only. A row with nothing unmasked on one side
/// gets zero from that side.
pub fn dense_attention_oracle<T: Scalar>(
    h: &Array2<T>,
    coords: &[Coord],
    mask_local: &Array2<bool>,
    mask_global: &Array2<bool>,
    params: &AttnParams<T>,
) -> Result<Array2<T>> {
    let rows = h.nrows();
    let d = h.ncols();
    let heads = params.num_heads;
    if mask_local.dim() != (rows, rows) || mask_global.dim() != (rows, rows) {
        return Err(SpanError::DimensionMismatch("mask shape".into()));
    }
    if heads == 0 || !d.is_multiple_of(heads) || params.wq.dim() != (d, d) {
        return Err(SpanError::DimensionMismatch("projection shape".into()));
    }
    let dh = d / heads;
    let w = params.rpb.w_side as i64;
    let side = 2 * w - 1;

    let project = |wm: &Array2<T>, b: &ndarray::Array1<T>| {
        let mut out = Array2::<T>::zeros((rows, d));
        for i in 0..rows {
            for o in 0..d {
                let mut acc = b[o];
                for c in 0..d {
                    acc += h[[i, c]] * wm[[c, o]];
                }
                out[[i, o]] = acc;
            }
        }
        out
    };
    let q = project(&params.wq, &params.bq);
    let k = project(&params.wk, &params.bk);
    let v = project(&params.wv, &params.bv);
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut concat = Array2::<T>::zeros((rows, d));

    for head in 0..heads {
        let lo = head * dh;
        let mut scores = Array2::<T>::from_elem((rows, rows), T::neg_infinity());
        for i in 0..rows {
            for j in 0..rows {
                let mut s = T::zero();
                for c in lo..lo + dh {
                    s += q[[i, c]] * k[[j, c]];
                }
                scores[[i, j]] = s * scale;
            }
        }
        for (mask, with_bias) in [(mask_local, true), (mask_global, false)] {
            for i in 0..rows {
                let mut e = vec![T::neg_infinity(); rows];
                let mut any = false;
                for j in 0..rows {
                    if !mask[[i, j]] {
                        continue;
                    }
                    any = true;
                    let mut s = scores[[i, j]];
                    if with_bias {
                        let dx = coords[i].x as i64 - coords[j].x as i64;
                        let dy = coords[i].y as i64 - coords[j].y as i64;
                        let row = ((dx + w - 1) * side + (dy + w - 1)) as usize;
                        s += params.rpb.bias[[row, head]];
                    }
                    e[j] = s;
                }
                if !any {
                    continue;
                }
                let m = e.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = e.iter().map(|&s| (s - m).exp()).sum();
                for j in 0..rows {
                    if !mask[[i, j]] {
                        continue;
                    }
                    let p = (e[j] - m).exp() / z;
                    for c in lo..lo + dh {
                        concat[[i, c]] += p * v[[j, c]];
                    }
                }
            }
        }
    }
    let mut out = Array2::<T>::zeros((rows, d));
    for i in 0..rows {
        for o in 0..d {
            let mut acc = params.bo[o];
            for c in 0..d {
                acc += concat[[i, c]] * params.wo[[c, o]];
            }
            out[[i, o]] = acc;
        }
    }
    Ok(out)
}

/// Output coordinates and `(offset, i_in, i_out)` triples by exhaustive scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BruteConvRulebook {
    pub out_coords: Vec<Coord>,
    pub pairs: BTreeSet<(usize, u32, u32)>,
}

pub fn brute_force_conv_rulebook(coords: &[Coord], spec: &ConvSpec) -> Result<BruteConvRulebook> {
    if coords.len() > BRUTE_FORCE_LIMIT {
        return Err(SpanError::TooLarge(coords.len()));
    }
    let (k, s, dil) = (spec.kernel as i64, spec.stride as i64, spec.dilation as i64);
    // any output reachable from some input by some offset
    let mut outs = BTreeSet::new();
    for c in coords {
        for ky in 0..k {
            for kx in 0..k {
                let (rx, ry) = (c.x as i64 - kx * dil, c.y as i64 - ky * dil);
                if rx >= 0 && ry >= 0 && rx % s == 0 && ry % s == 0 {
                    outs.insert(Coord::new((rx / s) as u32, (ry / s) as u32));
                }
            }
        }
    }
    let out_coords: Vec<Coord> = outs.into_iter().collect();
    let mut pairs = BTreeSet::new();
    for (o, po) in out_coords.iter().enumerate() {
        for (i, pi) in coords.iter().enumerate() {
            for ky in 0..k {
                for kx in 0..k {
                    let hit = pi.x as i64 == s * po.x as i64 + kx * dil && pi.y as i64 == s * po.y as i64 + ky * dil;
                    if hit {
                        pairs.insert(((ky * k + kx) as usize, i as u32, o as u32));
                    }
                }
            }
        }
    }
    Ok(BruteConvRulebook { out_coords, pairs })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BruteAttnRulebook {
    pub local: BTreeSet<(u32, u32)>,
    pub global: BTreeSet<(u32, u32)>,
}

/// Two tokens are local partners iff their shifted block indices agree, or
/// every token lies in one block of the unshifted partition.
pub fn brute_force_attn_rulebook(coords: &[Coord], w_side: usize, shift: Shift, num_ctx: usize) -> Result<BruteAttnRulebook> {
    let n = coords.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(SpanError::TooLarge(n));
    }
    if w_side == 0 {
        return Err(SpanError::InvalidConfig("window side must be >= 1".into()));
    }
    let w = w_side as u64;
    let off = match shift {
        Shift::None => 0,
        Shift::Half => w / 2,
    };
    let block = |c: &Coord, off: u64| ((c.x as u64 + off) / w, (c.y as u64 + off) / w);
    let one_block = coords.iter().all(|c| block(c, 0) == block(&coords[0], 0));
    let mut local = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if one_block || block(&coords[i], off) == block(&coords[j], off) {
                local.insert((i as u32, j as u32));
            }
        }
    }
    let mut global = BTreeSet::new();
    for i in 0..n as u32 {
        for b in 0..num_ctx as u32 {
            global.insert((i, n as u32 + b));
            global.insert((n as u32 + b, i));
        }
    }
    Ok(BruteAttnRulebook { local, global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_forward, build_attention_rulebook};
    use crate::conv::{build_conv_rulebook, sac_forward};
    use crate::sparse::build_sparse_map;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(x: u32, y: u32) -> Coord {
        Coord::new(x, y)
    }

    #[test]
    fn identity_conv() {
        let m = build_sparse_map(vec![c(0, 0), c(1, 1)], array![[1.0, 2.0], [3.0, 4.0]], 0).unwrap();
        let t = DenseTensor::from_map(&m, 2, 2).unwrap();
        let spec = ConvSpec::new(1, 1, 1, 2, 2).unwrap();
        let p = ConvParams { weight: Array2::eye(2), bias: Array1::zeros(2) };
        assert_eq!(dense_conv_oracle(&t, &spec, &p).unwrap(), t.data);
    }

    #[test]
    fn ones_kernel_sums() {
        let coords = vec![c(0, 0), c(1, 0), c(0, 1), c(1, 1)];
        let m = build_sparse_map(coords, Array2::<f64>::ones((4, 1)), 0).unwrap();
        let t = DenseTensor::from_map(&m, 2, 2).unwrap();
        let spec = ConvSpec::new(2, 1, 1, 1, 1).unwrap();
        let p = ConvParams { weight: Array2::ones((4, 1)), bias: Array1::zeros(1) };
        let out = dense_conv_oracle(&t, &spec, &p).unwrap();
        assert_eq!(out.dim(), (1, 1, 1));
        assert_eq!(out[[0, 0, 0]], 4.0);
    }

    #[test]
    fn too_small_input() {
        let m = build_sparse_map(vec![c(0, 0)], Array2::ones((1, 1)), 0).unwrap();
        let t = DenseTensor::from_map(&m, 1, 1).unwrap();
        let spec = ConvSpec::new(2, 1, 1, 1, 1).unwrap();
        let p = ConvParams::<f64>::zeros(4, 1, 1);
        assert_eq!(dense_conv_oracle(&t, &spec, &p).unwrap_err(), SpanError::NonPositiveOutputSize);
    }

    #[test]
    fn conv_matches_sparse_on_16x16() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<Coord> = (0..16).flat_map(|y| (0..16).map(move |x| c(x, y))).filter(|_| true).collect();
        let coords: Vec<Coord> = coords.into_iter().filter(|_| rng.random_bool(0.4)).collect();
        let n = coords.len();
        let feats = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let m = build_sparse_map(coords, feats, 0).unwrap();
        let spec = ConvSpec::new(2, 2, 1, 3, 5).unwrap();
        let p = ConvParams::<f64>::random(4, 3, 5, &mut rng);
        let rb = build_conv_rulebook(m.coords(), &spec).unwrap();
        let sparse = sac_forward(&m, &rb, &p).unwrap();
        let dense = dense_conv_oracle(&DenseTensor::from_map(&m, 16, 16).unwrap(), &spec, &p).unwrap();
        for (co, row) in sparse.coords().iter().zip(sparse.features().rows()) {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - dense[[co.y as usize, co.x as usize, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn brute_conv_identity_is_diagonal() {
        let coords = vec![c(0, 0), c(4, 1), c(2, 7)];
        let mut sorted = coords.clone();
        sorted.sort();
        let rb = brute_force_conv_rulebook(&sorted, &ConvSpec::new(1, 1, 1, 1, 1).unwrap()).unwrap();
        assert_eq!(rb.out_coords, sorted);
        assert!(rb.pairs.iter().all(|&(k, i, o)| k == 0 && i == o));
        assert_eq!(rb.pairs.len(), 3);
    }

    #[test]
    fn brute_force_guard() {
        let coords: Vec<Coord> = (0..501).map(|x| c(x, 0)).collect();
        let spec = ConvSpec::new(1, 1, 1, 1, 1).unwrap();
        assert_eq!(brute_force_conv_rulebook(&coords, &spec).unwrap_err(), SpanError::TooLarge(501));
        assert!(brute_force_attn_rulebook(&coords, 2, Shift::None, 1).is_err());
    }

    #[test]
    fn brute_attn_small_example() {
        let rb = brute_force_attn_rulebook(&[c(0, 0), c(1, 0), c(0, 1)], 2, Shift::None, 1).unwrap();
        assert_eq!(rb.local.len(), 9);
        assert_eq!(rb.global.len(), 6);
    }

    #[test]
    fn self_only_mask_returns_own_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coords = vec![c(0, 0), c(1, 0), c(2, 0)];
        let mut p = AttnParams::<f64>::random(4, 2, 2, &mut rng);
        p.wo = Array2::eye(4);
        let h = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let local: BTreeSet<_> = (0..3).map(|i| (i, i)).collect();
        let (ml, mg) = attention_masks(3, &local, &BTreeSet::new());
        let out = dense_attention_oracle(&h, &coords, &ml, &mg, &p).unwrap();
        let v = h.dot(&p.wv) + &p.bv;
        for (a, b) in out.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_sparse_n32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts = BTreeSet::new();
        while pts.len() < 32 {
            pts.insert(c(rng.random_range(0..12), rng.random_range(0..12)));
        }
        let coords: Vec<Coord> = pts.into_iter().collect();
        let mut p = AttnParams::<f32>::random(8, 4, 4, &mut rng);
        p.rpb.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let h = Array2::from_shape_fn((33, 8), |_| rng.random_range(-1.0f32..1.0));
        for shift in [Shift::None, Shift::Half] {
            let rb = build_attention_rulebook(&coords, 4, shift, 1).unwrap();
            let fast = attention_forward(h.view(), &coords, &rb, &p).unwrap();
            let brute = brute_force_attn_rulebook(&coords, 4, shift, 1).unwrap();
            let (ml, mg) = attention_masks(33, &brute.local, &brute.global);
            let slow = dense_attention_oracle(&h, &coords, &ml, &mg, &p).unwrap();
            let err = fast.iter().zip(slow.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err < 1e-5, "{shift:?}: {err}");
        }
    }
}
