//! Windowed sparse attention with global context tokens.
//!
//! Windows are read off the dense index grid. Each patch token attends to
//! the tokens sharing its window (local pairs, with a relative position bias)
//! and, separately, to the context tokens (global pairs, no bias). Context
//! tokens attend to every patch token. Local and global softmaxes are
//! normalized independently and their outputs summed.

use crate::error::{Result, SpanError};
use crate::layers::{FeedForward, FfnSaved, LayerNorm, NormSaved};
use crate::scalar::Scalar;
use crate::sparse::{Coord, DenseIndexGrid, SparseMap};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    None,
    Half,
}

impl Shift {
    /// Zero rows/columns prepended before tessellation.
    pub fn offset(self, w_side: usize) -> usize {
        match self {
            Shift::None => 0,
            Shift::Half => w_side / 2,
        }
    }
}

/// Non-empty windows of one partition, each listing 1-based token ids in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSet {
    pub windows: Vec<Vec<u32>>,
    pub shift: Shift,
}

/// Pads the grid (after prepending `W/2` rows and columns for the shifted
/// partition) to a multiple of `w_side`, cuts it into `w_side x w_side`
/// blocks and keeps the occupied ones.
pub fn generate_windows(grid: &DenseIndexGrid, w_side: usize, shift: Shift) -> Result<WindowSet> {
    if w_side == 0 {
        return Err(SpanError::InvalidConfig("window side must be >= 1".into()));
    }
    if shift == Shift::Half && !w_side.is_multiple_of(2) {
        return Err(SpanError::InvalidConfig(format!("shifted windows need an even side, got {w_side}")));
    }
    let off = shift.offset(w_side);
    let (h, w) = grid.bounds();
    let blocks_y = (h + off).div_ceil(w_side);
    let blocks_x = (w + off).div_ceil(w_side);
    let mut windows = Vec::new();
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let mut ids = Vec::new();
            for py in by * w_side..(by + 1) * w_side {
                if py < off || py - off >= h {
                    continue;
                }
                for px in bx * w_side..(bx + 1) * w_side {
                    if px < off || px - off >= w {
                        continue;
                    }
                    let v = grid.get(py - off, px - off);
                    if v != 0 {
                        ids.push(v);
                    }
                }
            }
            if !ids.is_empty() {
                windows.push(ids);
            }
        }
    }
    Ok(WindowSet { windows, shift })
}

/// Learnable relative position bias, `(2W-1)^2` offsets by `heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct RpbTable<T> {
    pub w_side: usize,
    /// Row `(dx + W - 1) * (2W - 1) + (dy + W - 1)`, one column per head.
    pub bias: Array2<T>,
}

impl<T: Scalar> RpbTable<T> {
    pub fn zeros(w_side: usize, heads: usize) -> Self {
        let side = 2 * w_side.max(1) - 1;
        Self { w_side, bias: Array2::zeros((side * side, heads)) }
    }

    pub fn heads(&self) -> usize {
        self.bias.ncols()
    }

    pub fn side(&self) -> usize {
        2 * self.w_side.max(1) - 1
    }

    /// Table row for offset `p_i - p_j`.
    pub fn index(w_side: usize, dx: i64, dy: i64) -> usize {
        let w = w_side as i64;
        debug_assert!(dx.abs() < w && dy.abs() < w, "offset ({dx},{dy}) outside window {w_side}");
        ((dx + w - 1) * (2 * w - 1) + (dy + w - 1)) as usize
    }

    pub fn get(&self, dx: i64, dy: i64, head: usize) -> T {
        self.bias[[Self::index(self.w_side, dx, dy), head]]
    }

    /// `(dx, dy, head, value)` for every table entry.
    pub fn entries(&self) -> Vec<(i64, i64, usize, T)> {
        let w = self.w_side.max(1) as i64;
        let mut out = Vec::with_capacity(self.bias.len());
        for dx in -(w - 1)..w {
            for dy in -(w - 1)..w {
                for h in 0..self.heads() {
                    out.push((dx, dy, h, self.get(dx, dy, h)));
                }
            }
        }
        out
    }
}

/// Local and global attention pairs for one partition.
///
/// Local pairs are stored per query in CSR form with key indices sorted
/// ascending; context tokens own no local pairs. Global pairs are implicit:
/// patch `i` attends to `N..N+num_ctx`, context `N+b` attends to `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnRulebook {
    coords: Vec<Coord>,
    num_ctx: usize,
    w_side: usize,
    shift: Shift,
    compact: bool,
    local_offsets: Vec<usize>,
    local_keys: Vec<u32>,
    local_bias: Vec<u32>,
}

impl AttnRulebook {
    pub fn n_tokens(&self) -> usize {
        self.coords.len()
    }

    pub fn num_ctx(&self) -> usize {
        self.num_ctx
    }

    pub fn w_side(&self) -> usize {
        self.w_side
    }

    pub fn shift(&self) -> Shift {
        self.shift
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    /// True when every token sits in one block and attention is full.
    pub fn is_compact(&self) -> bool {
        self.compact
    }

    pub fn local_keys(&self, query: usize) -> &[u32] {
        &self.local_keys[self.local_offsets[query]..self.local_offsets[query + 1]]
    }

    pub fn local_pair_count(&self) -> usize {
        self.local_keys.len()
    }

    pub fn local_pairs(&self) -> Vec<(u32, u32)> {
        (0..self.n_tokens())
            .flat_map(|i| self.local_keys(i).iter().map(move |&j| (i as u32, j)))
            .collect()
    }

    pub fn global_pair_count(&self) -> usize {
        2 * self.n_tokens() * self.num_ctx
    }

    pub fn global_pairs(&self) -> Vec<(u32, u32)> {
        let n = self.n_tokens() as u32;
        let c = self.num_ctx as u32;
        let mut out = Vec::with_capacity(self.global_pair_count());
        for i in 0..n {
            for b in 0..c {
                out.push((i, n + b));
            }
        }
        for b in 0..c {
            for i in 0..n {
                out.push((n + b, i));
            }
        }
        out
    }

    pub fn heap_bytes(&self) -> usize {
        self.coords.len() * std::mem::size_of::<Coord>()
            + self.local_offsets.len() * std::mem::size_of::<usize>()
            + (self.local_keys.len() + self.local_bias.len()) * 4
    }
}

/// Builds local pairs from the window partition (self-pairs included) and
/// the implicit global pairs. When all tokens fall inside a single block of
/// the regular partition, local attention is full attention for both the
/// regular and the shifted partition.
pub fn build_attention_rulebook(coords: &[Coord], w_side: usize, shift: Shift, num_ctx: usize) -> Result<AttnRulebook> {
    if coords.is_empty() {
        return Err(SpanError::EmptyMap);
    }
    if w_side == 0 {
        return Err(SpanError::InvalidConfig("window side must be >= 1".into()));
    }
    let n = coords.len();
    let w = w_side as u32;
    let first = (coords[0].x / w, coords[0].y / w);
    let compact = coords.iter().all(|c| (c.x / w, c.y / w) == first);
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); n];
    if compact {
        let all: Vec<u32> = (0..n as u32).collect();
        members.iter_mut().for_each(|m| m.clone_from(&all));
    } else {
        let grid = DenseIndexGrid::from_coords(coords)?;
        for window in generate_windows(&grid, w_side, shift)?.windows {
            for &q in &window {
                members[q as usize - 1] = window.iter().map(|&id| id - 1).collect();
            }
        }
    }
    let mut local_offsets = Vec::with_capacity(n + 1);
    let mut local_keys = Vec::new();
    let mut local_bias = Vec::new();
    local_offsets.push(0);
    for (i, keys) in members.into_iter().enumerate() {
        let pi = coords[i];
        for j in keys {
            let pj = coords[j as usize];
            let dx = pi.x as i64 - pj.x as i64;
            let dy = pi.y as i64 - pj.y as i64;
            local_keys.push(j);
            local_bias.push(RpbTable::<f64>::index(w_side, dx, dy) as u32);
        }
        local_offsets.push(local_keys.len());
    }
    Ok(AttnRulebook {
        coords: coords.to_vec(),
        num_ctx,
        w_side,
        shift,
        compact,
        local_offsets,
        local_keys,
        local_bias,
    })
}

/// Projections and bias table of one multi-head attention layer. Weights
/// are `d_in x d_out`, applied as `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub rpb: RpbTable<T>,
    pub num_heads: usize,
}

impl<T: Scalar> AttnParams<T> {
    pub fn zeros(d: usize, num_heads: usize, w_side: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            rpb: RpbTable::zeros(w_side, num_heads),
            num_heads,
        }
    }

    pub fn random<R: Rng>(d: usize, num_heads: usize, w_side: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = || Array2::from_shape_fn((d, d), |_| T::lit(rng.random_range(-bound..bound)));
        let (wq, wk, wv, wo) = (mat(), mat(), mat(), mat());
        Self { wq, wk, wv, wo, ..Self::zeros(d, num_heads, w_side) }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.num_heads
    }
}

/// Intermediates kept for [`attention_backward`].
#[derive(Debug, Clone)]
pub struct AttnSaved<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    concat: Array2<T>,
    /// `[local pair][head]`
    local_probs: Vec<T>,
    /// patch queries first (`N * C`), then context queries (`C * N`); `[pair][head]`
    global_probs: Vec<T>,
}

fn check_attention_inputs<T: Scalar>(h: &ArrayView2<T>, coords: &[Coord], rb: &AttnRulebook, params: &AttnParams<T>) -> Result<()> {
    if rb.coords() != coords {
        return Err(SpanError::RulebookMismatch("attention rulebook was built for other coordinates".into()));
    }
    let rows = rb.n_tokens() + rb.num_ctx();
    if h.nrows() != rows {
        return Err(SpanError::RulebookMismatch(format!(
            "rulebook covers {rows} rows, input has {}",
            h.nrows()
        )));
    }
    if h.ncols() != params.dim() {
        return Err(SpanError::DimensionMismatch(format!(
            "input width {} vs projection width {}",
            h.ncols(),
            params.dim()
        )));
    }
    if params.num_heads == 0 || !params.dim().is_multiple_of(params.num_heads) {
        return Err(SpanError::DimensionMismatch(format!(
            "width {} is not divisible by {} heads",
            params.dim(),
            params.num_heads
        )));
    }
    if params.rpb.heads() != params.num_heads || params.rpb.w_side != rb.w_side() {
        return Err(SpanError::DimensionMismatch("bias table shape does not match heads/window".into()));
    }
    Ok(())
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// In-place softmax.
#[inline]
fn softmax_in_place<T: Scalar>(scores: &mut [T]) {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

pub fn attention_forward<T: Scalar>(
    h: ArrayView2<T>,
    coords: &[Coord],
    rb: &AttnRulebook,
    params: &AttnParams<T>,
) -> Result<Array2<T>> {
    attention_forward_saved(h, coords, rb, params).map(|(y, _)| y)
}

pub fn attention_forward_saved<T: Scalar>(
    h: ArrayView2<T>,
    coords: &[Coord],
    rb: &AttnRulebook,
    params: &AttnParams<T>,
) -> Result<(Array2<T>, AttnSaved<T>)> {
    check_attention_inputs(&h, coords, rb, params)?;
    let n = rb.n_tokens();
    let c = rb.num_ctx();
    let d = params.dim();
    let heads = params.num_heads;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let q = h.dot(&params.wq) + &params.bq;
    let k = h.dot(&params.wk) + &params.bk;
    let v = h.dot(&params.wv) + &params.bv;
    let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    let mut concat = Array2::<T>::zeros((n + c, d));
    let out = concat.as_slice_mut().unwrap();
    let mut local_probs = vec![T::zero(); rb.local_pair_count() * heads];
    let mut global_probs = vec![T::zero(); rb.global_pair_count() * heads];
    let rpb = &params.rpb.bias;
    let mut scores: Vec<T> = Vec::new();

    for head in 0..heads {
        let col = head * dh;
        for i in 0..n {
            let keys = rb.local_keys(i);
            let base = rb.local_offsets[i];
            let qi = &qs[i * d + col..i * d + col + dh];
            scores.clear();
            for (p, &j) in keys.iter().enumerate() {
                let kj = &ks[j as usize * d + col..j as usize * d + col + dh];
                let b = rpb[[rb.local_bias[base + p] as usize, head]];
                scores.push(dot(qi, kj) * scale + b);
            }
            softmax_in_place(&mut scores);
            let oi = &mut out[i * d + col..i * d + col + dh];
            for (p, &j) in keys.iter().enumerate() {
                let w = scores[p];
                local_probs[(base + p) * heads + head] = w;
                let vj = &vs[j as usize * d + col..j as usize * d + col + dh];
                oi.iter_mut().zip(vj).for_each(|(o, &x)| *o += w * x);
            }
        }
        if c == 0 {
            continue;
        }
        // global: patch -> context
        for i in 0..n {
            let qi = &qs[i * d + col..i * d + col + dh];
            scores.clear();
            for b in 0..c {
                let kj = &ks[(n + b) * d + col..(n + b) * d + col + dh];
                scores.push(dot(qi, kj) * scale);
            }
            softmax_in_place(&mut scores);
            let oi = &mut out[i * d + col..i * d + col + dh];
            for b in 0..c {
                let w = scores[b];
                global_probs[(i * c + b) * heads + head] = w;
                let vj = &vs[(n + b) * d + col..(n + b) * d + col + dh];
                oi.iter_mut().zip(vj).for_each(|(o, &x)| *o += w * x);
            }
        }
        // global: context -> patch
        for b in 0..c {
            let qb = &qs[(n + b) * d + col..(n + b) * d + col + dh];
            scores.clear();
            for j in 0..n {
                let kj = &ks[j * d + col..j * d + col + dh];
                scores.push(dot(qb, kj) * scale);
            }
            softmax_in_place(&mut scores);
            let ob = &mut out[(n + b) * d + col..(n + b) * d + col + dh];
            for j in 0..n {
                let w = scores[j];
                global_probs[(n * c + b * n + j) * heads + head] = w;
                let vj = &vs[j * d + col..j * d + col + dh];
                ob.iter_mut().zip(vj).for_each(|(o, &x)| *o += w * x);
            }
        }
    }
    let y = concat.dot(&params.wo) + &params.bo;
    Ok((y, AttnSaved { x: h.to_owned(), q, k, v, concat, local_probs, global_probs }))
}

/// Gradients of one attention layer; `params` has the layout of
/// [`AttnParams`].
#[derive(Debug, Clone)]
pub struct AttnGrads<T> {
    pub input: Array2<T>,
    pub params: AttnParams<T>,
}

/// Softmax backward for one query: accumulates `dq`, `dk`, `dv` and returns
/// the score gradients through `dscore`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn softmax_pair_backward<T: Scalar>(
    probs: &[T],
    keys: &[usize],
    dout: &[T],
    qi: &[T],
    ks: &[T],
    vs: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    d: usize,
    col: usize,
    scale: T,
    dscore: &mut Vec<T>,
) {
    let dh = dout.len();
    dscore.clear();
    let mut weighted = T::zero();
    for (&p, &j) in probs.iter().zip(keys) {
        let vj = &vs[j * d + col..j * d + col + dh];
        let dp = dot(dout, vj);
        dscore.push(dp);
        weighted += p * dp;
        let dvj = &mut dv[j * d + col..j * d + col + dh];
        dvj.iter_mut().zip(dout).for_each(|(g, &o)| *g += p * o);
    }
    for ((ds, &p), &j) in dscore.iter_mut().zip(probs).zip(keys) {
        *ds = p * (*ds - weighted);
        let g = *ds * scale;
        let kj = &ks[j * d + col..j * d + col + dh];
        dq.iter_mut().zip(kj).for_each(|(a, &b)| *a += g * b);
        let dkj = &mut dk[j * d + col..j * d + col + dh];
        dkj.iter_mut().zip(qi).for_each(|(a, &b)| *a += g * b);
    }
}

pub fn attention_backward<T: Scalar>(
    grad_out: ArrayView2<T>,
    saved: &AttnSaved<T>,
    rb: &AttnRulebook,
    params: &AttnParams<T>,
) -> Result<AttnGrads<T>> {
    if grad_out.dim() != saved.x.dim() {
        return Err(SpanError::DimensionMismatch(format!(
            "grad_out {:?} vs forward output {:?}",
            grad_out.dim(),
            saved.x.dim()
        )));
    }
    let n = rb.n_tokens();
    let c = rb.num_ctx();
    let d = params.dim();
    let heads = params.num_heads;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut g = AttnParams::zeros(d, heads, rb.w_side());

    g.wo = saved.concat.t().dot(&grad_out);
    g.bo = grad_out.sum_axis(Axis(0));
    let dconcat = grad_out.dot(&params.wo.t());
    let dcs = dconcat.as_slice().unwrap();
    let (qs, ks, vs) = (saved.q.as_slice().unwrap(), saved.k.as_slice().unwrap(), saved.v.as_slice().unwrap());
    let mut dq = Array2::<T>::zeros((n + c, d));
    let mut dk = Array2::<T>::zeros((n + c, d));
    let mut dv = Array2::<T>::zeros((n + c, d));
    let (dqs, dks, dvs) = (dq.as_slice_mut().unwrap(), dk.as_slice_mut().unwrap(), dv.as_slice_mut().unwrap());
    let mut probs: Vec<T> = Vec::new();
    let mut keys: Vec<usize> = Vec::new();
    let mut dscore: Vec<T> = Vec::new();

    for head in 0..heads {
        let col = head * dh;
        for i in 0..n {
            let base = rb.local_offsets[i];
            keys.clear();
            keys.extend(rb.local_keys(i).iter().map(|&j| j as usize));
            probs.clear();
            probs.extend((0..keys.len()).map(|p| saved.local_probs[(base + p) * heads + head]));
            let dout = &dcs[i * d + col..i * d + col + dh];
            let qi = &qs[i * d + col..i * d + col + dh];
            let mut dqi = vec![T::zero(); dh];
            softmax_pair_backward(&probs, &keys, dout, qi, ks, vs, &mut dqi, dks, dvs, d, col, scale, &mut dscore);
            dqs[i * d + col..i * d + col + dh].iter_mut().zip(&dqi).for_each(|(a, &b)| *a += b);
            for (p, &ds) in dscore.iter().enumerate() {
                g.rpb.bias[[rb.local_bias[base + p] as usize, head]] += ds;
            }
        }
        if c == 0 {
            continue;
        }
        keys.clear();
        keys.extend(n..n + c);
        for i in 0..n {
            probs.clear();
            probs.extend((0..c).map(|b| saved.global_probs[(i * c + b) * heads + head]));
            let dout = &dcs[i * d + col..i * d + col + dh];
            let qi = &qs[i * d + col..i * d + col + dh];
            let mut dqi = vec![T::zero(); dh];
            softmax_pair_backward(&probs, &keys, dout, qi, ks, vs, &mut dqi, dks, dvs, d, col, scale, &mut dscore);
            dqs[i * d + col..i * d + col + dh].iter_mut().zip(&dqi).for_each(|(a, &b)| *a += b);
        }
        let patch_keys: Vec<usize> = (0..n).collect();
        for b in 0..c {
            probs.clear();
            probs.extend((0..n).map(|j| saved.global_probs[(n * c + b * n + j) * heads + head]));
            let row = n + b;
            let dout = &dcs[row * d + col..row * d + col + dh];
            let qb = &qs[row * d + col..row * d + col + dh];
            let mut dqb = vec![T::zero(); dh];
            softmax_pair_backward(&probs, &patch_keys, dout, qb, ks, vs, &mut dqb, dks, dvs, d, col, scale, &mut dscore);
            dqs[row * d + col..row * d + col + dh].iter_mut().zip(&dqb).for_each(|(a, &b)| *a += b);
        }
    }

    let x = &saved.x;
    g.wq = x.t().dot(&dq);
    g.bq = dq.sum_axis(Axis(0));
    g.wk = x.t().dot(&dk);
    g.bk = dk.sum_axis(Axis(0));
    g.wv = x.t().dot(&dv);
    g.bv = dv.sum_axis(Axis(0));
    let input = dq.dot(&params.wq.t()) + dk.dot(&params.wk.t()) + dv.dot(&params.wv.t());
    Ok(AttnGrads { input, params: g })
}

/// Pre-norm transformer sub-block: attention then feed-forward, each with a
/// residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBlockParams<T> {
    pub norm_attn: LayerNorm<T>,
    pub attn: AttnParams<T>,
    pub norm_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> SubBlockParams<T> {
    pub fn random<R: Rng>(d: usize, heads: usize, w_side: usize, ffn_ratio: usize, rng: &mut R) -> Self {
        Self {
            norm_attn: LayerNorm::new(d),
            attn: AttnParams::random(d, heads, w_side, rng),
            norm_ffn: LayerNorm::new(d),
            ffn: FeedForward::random(d, ffn_ratio * d, rng),
        }
    }

    pub fn zeros(d: usize, heads: usize, w_side: usize, ffn_ratio: usize) -> Self {
        Self {
            norm_attn: LayerNorm::zeros(d),
            attn: AttnParams::zeros(d, heads, w_side),
            norm_ffn: LayerNorm::zeros(d),
            ffn: FeedForward::zeros(d, ffn_ratio * d),
        }
    }
}

/// A regular-window sub-block followed by a shifted-window sub-block.
#[derive(Debug, Clone, PartialEq)]
pub struct CarParams<T> {
    pub regular: SubBlockParams<T>,
    pub shifted: SubBlockParams<T>,
}

impl<T: Scalar> CarParams<T> {
    pub fn random<R: Rng>(d: usize, heads: usize, w_side: usize, ffn_ratio: usize, rng: &mut R) -> Self {
        Self {
            regular: SubBlockParams::random(d, heads, w_side, ffn_ratio, rng),
            shifted: SubBlockParams::random(d, heads, w_side, ffn_ratio, rng),
        }
    }

    pub fn zeros(d: usize, heads: usize, w_side: usize, ffn_ratio: usize) -> Self {
        Self {
            regular: SubBlockParams::zeros(d, heads, w_side, ffn_ratio),
            shifted: SubBlockParams::zeros(d, heads, w_side, ffn_ratio),
        }
    }
}

/// The two partitions a CAR block attends over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarRulebooks {
    pub regular: AttnRulebook,
    pub shifted: AttnRulebook,
}

impl CarRulebooks {
    /// With `shift_enabled = false` both sub-blocks use the regular partition.
    pub fn build(coords: &[Coord], w_side: usize, shift_enabled: bool, num_ctx: usize) -> Result<Self> {
        let regular = build_attention_rulebook(coords, w_side, Shift::None, num_ctx)?;
        let shifted = if shift_enabled && w_side >= 2 {
            build_attention_rulebook(coords, w_side, Shift::Half, num_ctx)?
        } else {
            regular.clone()
        };
        Ok(Self { regular, shifted })
    }
}

#[derive(Debug, Clone)]
struct SubBlockSaved<T> {
    norm_attn: NormSaved<T>,
    attn: AttnSaved<T>,
    norm_ffn: NormSaved<T>,
    ffn: FfnSaved<T>,
}

#[derive(Debug, Clone)]
pub struct CarSaved<T> {
    regular: SubBlockSaved<T>,
    shifted: SubBlockSaved<T>,
}

fn sub_block_forward<T: Scalar>(
    x: ArrayView2<T>,
    coords: &[Coord],
    rb: &AttnRulebook,
    p: &SubBlockParams<T>,
) -> Result<(Array2<T>, SubBlockSaved<T>)> {
    let (n1, norm_attn) = p.norm_attn.forward(x);
    let (a, attn) = attention_forward_saved(n1.view(), coords, rb, &p.attn)?;
    let x1 = &x + &a;
    let (n2, norm_ffn) = p.norm_ffn.forward(x1.view());
    let (f, ffn) = p.ffn.forward(n2.view());
    Ok((x1 + f, SubBlockSaved { norm_attn, attn, norm_ffn, ffn }))
}

fn sub_block_backward<T: Scalar>(
    dy: ArrayView2<T>,
    saved: &SubBlockSaved<T>,
    rb: &AttnRulebook,
    p: &SubBlockParams<T>,
    grads: &mut SubBlockParams<T>,
) -> Result<Array2<T>> {
    let dn2 = p.ffn.backward(dy, &saved.ffn, &mut grads.ffn);
    let dx1 = &dy + &p.norm_ffn.backward(dn2.view(), &saved.norm_ffn, &mut grads.norm_ffn);
    let ag = attention_backward(dx1.view(), &saved.attn, rb, &p.attn)?;
    accumulate_attn(&mut grads.attn, &ag.params);
    let dx = &dx1 + &p.norm_attn.backward(ag.input.view(), &saved.norm_attn, &mut grads.norm_attn);
    Ok(dx)
}

fn accumulate_attn<T: Scalar>(dst: &mut AttnParams<T>, src: &AttnParams<T>) {
    dst.wq += &src.wq;
    dst.bq += &src.bq;
    dst.wk += &src.wk;
    dst.bk += &src.bk;
    dst.wv += &src.wv;
    dst.bv += &src.bv;
    dst.wo += &src.wo;
    dst.bo += &src.bo;
    dst.rpb.bias += &src.rpb.bias;
}

/// Runs a CAR block on stacked rows (patches then context).
pub fn car_block_forward_rows<T: Scalar>(
    h: ArrayView2<T>,
    coords: &[Coord],
    rbs: &CarRulebooks,
    params: &CarParams<T>,
) -> Result<(Array2<T>, CarSaved<T>)> {
    let (x1, regular) = sub_block_forward(h, coords, &rbs.regular, &params.regular)?;
    let (x2, shifted) = sub_block_forward(x1.view(), coords, &rbs.shifted, &params.shifted)?;
    Ok((x2, CarSaved { regular, shifted }))
}

/// Reverse pass of [`car_block_forward_rows`]; parameter gradients are added
/// into `grads`.
pub fn car_block_backward<T: Scalar>(
    grad_out: ArrayView2<T>,
    saved: &CarSaved<T>,
    rbs: &CarRulebooks,
    params: &CarParams<T>,
    grads: &mut CarParams<T>,
) -> Result<Array2<T>> {
    let d1 = sub_block_backward(grad_out, &saved.shifted, &rbs.shifted, &params.shifted, &mut grads.shifted)?;
    sub_block_backward(d1.view(), &saved.regular, &rbs.regular, &params.regular, &mut grads.regular)
}

/// Applies one CAR block to a map. `w_side = 0` disables the block.
pub fn car_block_forward<T: Scalar>(
    map: &SparseMap<T>,
    params: &CarParams<T>,
    w_side: usize,
    shift_enabled: bool,
) -> Result<SparseMap<T>> {
    if w_side == 0 || map.is_empty() {
        return Ok(map.clone());
    }
    let rbs = CarRulebooks::build(map.coords(), w_side, shift_enabled, map.num_ctx())?;
    let (out, _) = car_block_forward_rows(map.stacked().view(), map.coords(), &rbs, params)?;
    SparseMap::from_stacked(map.coords().to_vec(), out.view())
}

impl<T: Scalar> crate::autodiff::Parameters<T> for RpbTable<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'s, T>)) {
        f(prefix, self.bias.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, T>)) {
        f(prefix, self.bias.view_mut().into_dyn());
    }
}

crate::impl_parameters!(AttnParams { wq, bq, wk, bk, wv, bv, wo, bo, rpb });
crate::impl_parameters!(SubBlockParams { norm_attn, attn, norm_ffn, ffn });
crate::impl_parameters!(CarParams { regular, shifted });
