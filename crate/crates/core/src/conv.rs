//! Sparse convolution rulebooks and their execution.
//!
//! An input site `p_in` contributes to output site `p_out` through kernel
//! offset `k` iff `p_in = S * p_out + k * D` component-wise, with
//! `k in {0..K-1}^2`. Outputs that would land on negative coordinates are
//! dropped (valid padding at the origin).

use crate::error::{Result, SpanError};
use crate::scalar::Scalar;
use crate::sparse::{Coord, SparseMap};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    #[default]
    Forward,
    Transposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: u32,
    pub stride: u32,
    pub dilation: u32,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub kind: ConvKind,
}

impl ConvSpec {
    pub fn new(kernel: u32, stride: u32, dilation: u32, in_dim: usize, out_dim: usize) -> Result<Self> {
        let spec = Self { kernel, stride, dilation, in_dim, out_dim, kind: ConvKind::Forward };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(SpanError::InvalidConfig(format!(
                "kernel, stride and dilation must be >= 1 (got K={}, S={}, D={})",
                self.kernel, self.stride, self.dilation
            )));
        }
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(SpanError::InvalidConfig("feature dims must be positive".into()));
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        (self.kernel * self.kernel) as usize
    }
}

/// Kernel offset `(kx, ky)`; flat index `ky * K + kx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelOffset {
    pub kx: u32,
    pub ky: u32,
}

impl KernelOffset {
    pub fn all(kernel: u32) -> impl Iterator<Item = KernelOffset> {
        (0..kernel).flat_map(move |ky| (0..kernel).map(move |kx| KernelOffset { kx, ky }))
    }

    pub fn index(&self, kernel: u32) -> usize {
        (self.ky * kernel + self.kx) as usize
    }

    pub fn from_index(i: usize, kernel: u32) -> Self {
        Self { kx: i as u32 % kernel, ky: i as u32 / kernel }
    }
}

/// Output site reached from `p` through offset `k`, if any.
#[inline]
fn anchor(p: Coord, k: KernelOffset, stride: u32, dilation: u32) -> Option<Coord> {
    let ox = p.x as i64 - (k.kx * dilation) as i64;
    let oy = p.y as i64 - (k.ky * dilation) as i64;
    let s = stride as i64;
    if ox < 0 || oy < 0 || ox % s != 0 || oy % s != 0 {
        return None;
    }
    Some(Coord::new((ox / s) as u32, (oy / s) as u32))
}

pub fn compute_output_coords(coords_in: &[Coord], spec: &ConvSpec) -> Vec<Coord> {
    let mut out: Vec<Coord> = coords_in
        .iter()
        .flat_map(|&p| KernelOffset::all(spec.kernel).filter_map(move |k| anchor(p, k, spec.stride, spec.dilation)))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Per-offset `(input index, output index)` lists plus both coordinate sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvRulebook {
    kernel: u32,
    stride: u32,
    dilation: u32,
    kind: ConvKind,
    in_coords: Vec<Coord>,
    out_coords: Vec<Coord>,
    pairs: Vec<Vec<(u32, u32)>>,
}

impl ConvRulebook {
    pub fn kernel(&self) -> u32 {
        self.kernel
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn dilation(&self) -> u32 {
        self.dilation
    }

    pub fn kind(&self) -> ConvKind {
        self.kind
    }

    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_in(&self) -> usize {
        self.in_coords.len()
    }

    pub fn n_out(&self) -> usize {
        self.out_coords.len()
    }

    pub fn in_coords(&self) -> &[Coord] {
        &self.in_coords
    }

    pub fn out_coords(&self) -> &[Coord] {
        &self.out_coords
    }

    /// Pair list for flat offset index `k`, sorted by `(i_out, i_in)`.
    pub fn pairs(&self, k: usize) -> &[(u32, u32)] {
        &self.pairs[k]
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Bytes held by the coordinate sets and pair lists.
    pub fn heap_bytes(&self) -> usize {
        (self.in_coords.len() + self.out_coords.len()) * std::mem::size_of::<Coord>()
            + self.total_pairs() * std::mem::size_of::<(u32, u32)>()
    }

    /// Swaps input and output roles; the result maps back onto the original
    /// input coordinates exactly.
    pub fn transpose(&self) -> ConvRulebook {
        let pairs = self
            .pairs
            .iter()
            .map(|list| {
                let mut swapped: Vec<(u32, u32)> = list.iter().map(|&(i, o)| (o, i)).collect();
                swapped.sort_unstable_by_key(|&(i, o)| (o, i));
                swapped
            })
            .collect();
        ConvRulebook {
            kernel: self.kernel,
            stride: self.stride,
            dilation: self.dilation,
            kind: match self.kind {
                ConvKind::Forward => ConvKind::Transposed,
                ConvKind::Transposed => ConvKind::Forward,
            },
            in_coords: self.out_coords.clone(),
            out_coords: self.in_coords.clone(),
            pairs,
        }
    }
}

pub fn build_conv_rulebook(coords_in: &[Coord], spec: &ConvSpec) -> Result<ConvRulebook> {
    spec.validate()?;
    if spec.kind != ConvKind::Forward {
        return Err(SpanError::InvalidConfig(
            "transposed rulebooks come from transpose_rulebook, not from coordinates".into(),
        ));
    }
    let out_coords = compute_output_coords(coords_in, spec);
    let lookup: HashMap<Coord, u32> = out_coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let mut pairs = vec![Vec::new(); spec.kernel_volume()];
    for (i_in, &p) in coords_in.iter().enumerate() {
        for k in KernelOffset::all(spec.kernel) {
            if let Some(q) = anchor(p, k, spec.stride, spec.dilation) {
                pairs[k.index(spec.kernel)].push((i_in as u32, lookup[&q]));
            }
        }
    }
    for list in &mut pairs {
        list.sort_unstable_by_key(|&(i, o)| (o, i));
    }
    Ok(ConvRulebook {
        kernel: spec.kernel,
        stride: spec.stride,
        dilation: spec.dilation,
        kind: ConvKind::Forward,
        in_coords: coords_in.to_vec(),
        out_coords,
        pairs,
    })
}

pub fn transpose_rulebook(rb: &ConvRulebook) -> ConvRulebook {
    rb.transpose()
}

/// Weights `W(k)` (each `d_out x d_in`) stacked by offset, plus the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `K^2 * d_out` rows by `d_in` columns; block `k` is `W(k)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(kernel_volume: usize, in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Array2::zeros((kernel_volume * out_dim, in_dim)), bias: Array1::zeros(out_dim) }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn random<R: Rng>(kernel_volume: usize, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((kernel_volume * in_dim) as f64).sqrt();
        let weight = Array2::from_shape_fn((kernel_volume * out_dim, in_dim), |_| {
            T::lit(rng.random_range(-bound..bound))
        });
        Self { weight, bias: Array1::zeros(out_dim) }
    }

    pub fn from_offsets(weights: &[Array2<T>], bias: Array1<T>) -> Result<Self> {
        let views: Vec<ArrayView2<T>> = weights.iter().map(|w| w.view()).collect();
        let weight = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| SpanError::DimensionMismatch(format!("offset weights: {e}")))?;
        if weights.first().is_some_and(|w| w.nrows() != bias.len()) {
            return Err(SpanError::DimensionMismatch("bias length differs from d_out".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn kernel_volume(&self) -> usize {
        self.weight.nrows() / self.out_dim().max(1)
    }

    pub fn offset_weight(&self, k: usize) -> ArrayView2<'_, T> {
        let d_out = self.out_dim();
        self.weight.slice(s![k * d_out..(k + 1) * d_out, ..])
    }
}

/// Gradients of one sparse convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Array2<T>,
    pub context: Array2<T>,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

fn check_shapes<T: Scalar>(
    features: &ArrayView2<T>,
    context: &ArrayView2<T>,
    rb: &ConvRulebook,
    params: &ConvParams<T>,
) -> Result<()> {
    if rb.n_in() != features.nrows() {
        return Err(SpanError::RulebookMismatch(format!(
            "rulebook expects {} inputs, map has {}",
            rb.n_in(),
            features.nrows()
        )));
    }
    if params.kernel_volume() != rb.kernel_volume() {
        return Err(SpanError::DimensionMismatch(format!(
            "params carry {} offsets, rulebook {}",
            params.kernel_volume(),
            rb.kernel_volume()
        )));
    }
    if features.ncols() != params.in_dim() {
        return Err(SpanError::DimensionMismatch(format!(
            "features are {}-wide, weights expect {}",
            features.ncols(),
            params.in_dim()
        )));
    }
    if context.nrows() > 0 && context.ncols() != params.in_dim() {
        return Err(SpanError::DimensionMismatch("context width".into()));
    }
    Ok(())
}

/// Whether the context rows are projected (`d_in != d_out`) or passed through.
pub fn projects_context<T: Scalar>(params: &ConvParams<T>) -> bool {
    params.in_dim() != params.out_dim()
}

/// Executes the rulebook on raw matrices. Returns `(features, context)`.
pub fn sac_forward_rows<T: Scalar>(
    features: ArrayView2<T>,
    context: ArrayView2<T>,
    rb: &ConvRulebook,
    params: &ConvParams<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    check_shapes(&features, &context, rb, params)?;
    let d_out = params.out_dim();
    let mut out = Array2::zeros((rb.n_out(), d_out));
    out.rows_mut().into_iter().for_each(|mut r| r.assign(&params.bias));
    for k in 0..rb.kernel_volume() {
        let pairs = rb.pairs(k);
        if pairs.is_empty() {
            continue;
        }
        let idx: Vec<usize> = pairs.iter().map(|&(i, _)| i as usize).collect();
        let gathered = features.select(Axis(0), &idx);
        let contrib = gathered.dot(&params.offset_weight(k).t());
        for (row, &(_, o)) in contrib.rows().into_iter().zip(pairs) {
            let mut dst = out.row_mut(o as usize);
            dst += &row;
        }
    }
    let ctx_out = if projects_context(params) {
        let kv = T::lit(rb.kernel_volume() as f64);
        let mut acc = Array2::zeros((context.nrows(), d_out));
        for k in 0..rb.kernel_volume() {
            acc += &context.dot(&params.offset_weight(k).t());
        }
        acc.mapv_inplace(|v| v / kv);
        acc += &params.bias;
        acc
    } else {
        context.to_owned()
    };
    Ok((out, ctx_out))
}

/// Sparse convolution of a map: output coordinates are the rulebook's.
pub fn sac_forward<T: Scalar>(map: &SparseMap<T>, rb: &ConvRulebook, params: &ConvParams<T>) -> Result<SparseMap<T>> {
    let (features, context) = sac_forward_rows(map.features().view(), map.context().view(), rb, params)?;
    Ok(SparseMap::from_canonical(rb.out_coords().to_vec(), features, context))
}

/// Reverse pass of [`sac_forward_rows`] given the saved forward inputs.
pub fn sac_backward<T: Scalar>(
    grad_out: ArrayView2<T>,
    grad_out_ctx: ArrayView2<T>,
    features: ArrayView2<T>,
    context: ArrayView2<T>,
    rb: &ConvRulebook,
    params: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    check_shapes(&features, &context, rb, params)?;
    let d_out = params.out_dim();
    if grad_out.nrows() != rb.n_out() || grad_out.ncols() != d_out {
        return Err(SpanError::DimensionMismatch(format!(
            "grad_out is {:?}, expected ({}, {})",
            grad_out.dim(),
            rb.n_out(),
            d_out
        )));
    }
    if grad_out_ctx.nrows() != context.nrows() {
        return Err(SpanError::DimensionMismatch("context gradient rows".into()));
    }
    let mut grad_in = Array2::zeros(features.raw_dim());
    let mut grad_w = Array2::zeros(params.weight.raw_dim());
    let mut grad_b = grad_out.sum_axis(Axis(0));
    for k in 0..rb.kernel_volume() {
        let pairs = rb.pairs(k);
        if pairs.is_empty() {
            continue;
        }
        let in_idx: Vec<usize> = pairs.iter().map(|&(i, _)| i as usize).collect();
        let out_idx: Vec<usize> = pairs.iter().map(|&(_, o)| o as usize).collect();
        let g = grad_out.select(Axis(0), &out_idx);
        let x = features.select(Axis(0), &in_idx);
        let gx = g.dot(&params.offset_weight(k));
        for (row, &i) in gx.rows().into_iter().zip(&in_idx) {
            let mut dst = grad_in.row_mut(i);
            dst += &row;
        }
        let mut gw = grad_w.slice_mut(s![k * d_out..(k + 1) * d_out, ..]);
        gw += &g.t().dot(&x);
    }
    let grad_ctx = if projects_context(params) {
        let inv = T::one() / T::lit(rb.kernel_volume() as f64);
        let scaled = grad_out_ctx.mapv(|v| v * inv);
        let mut gc = Array2::zeros(context.raw_dim());
        for k in 0..rb.kernel_volume() {
            gc += &scaled.dot(&params.offset_weight(k));
            let mut gw = grad_w.slice_mut(s![k * d_out..(k + 1) * d_out, ..]);
            gw += &scaled.t().dot(&context);
        }
        grad_b += &grad_out_ctx.sum_axis(Axis(0));
        gc
    } else {
        grad_out_ctx.to_owned()
    };
    Ok(ConvGrads { input: grad_in, context: grad_ctx, weight: grad_w, bias: grad_b })
}

crate::impl_parameters!(ConvParams { weight, bias });
