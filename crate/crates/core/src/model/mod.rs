//! SPAN backbone, MIL classification head and UNet decoder.
//!
//! A forward pass records every operation on a [`Tape`]; the tape value of
//! each stage is the stacked `(N + num_ctx) x d` matrix (patch rows first).
//! Gradients are collected into a [`ModelParams`] of the same layout.

pub mod checkpoint;
pub mod config;
pub mod loss;

pub use config::{Ablation, Ablations, HeadKind, LossSpec, ModelConfig, SkipMode, StageSpec};

use crate::attention::{car_block_backward, car_block_forward_rows, CarParams, CarRulebooks};
use crate::autodiff::{Tape, Var};
use crate::conv::{build_conv_rulebook, sac_backward, sac_forward_rows, ConvParams, ConvRulebook};
use crate::error::{Result, SpanError};
use crate::layers::Linear;
use crate::scalar::Scalar;
use crate::sparse::{Coord, SparseMap};
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    pub sac: ConvParams<T>,
    pub cars: Vec<CarParams<T>>,
}
crate::impl_parameters!(StageParams { sac, cars });

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStageParams<T> {
    pub cars: Vec<CarParams<T>>,
    pub sac: ConvParams<T>,
}
crate::impl_parameters!(DecoderStageParams { cars, sac });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Learnable context rows added after the first stage's projection.
    pub ctx_token: Array2<T>,
    pub stages: Vec<StageParams<T>>,
    pub cls: Option<Linear<T>>,
    pub decoder: Vec<DecoderStageParams<T>>,
    pub seg: Option<Linear<T>>,
}
crate::impl_parameters!(ModelParams { ctx_token, stages, cls, decoder, seg });

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.stage_specs()?;
        let window = cfg.window.max(1);
        let cars = |d: usize, rng: &mut R| -> Vec<CarParams<T>> {
            (0..cfg.car_pairs).map(|_| CarParams::random(d, cfg.heads, window, cfg.ffn_ratio, rng)).collect()
        };
        let d0 = cfg.dims[0];
        let token_bound = 1.0 / (d0 as f64).sqrt();
        let ctx_token = Array2::from_shape_fn((cfg.effective_num_ctx(), d0), |_| T::lit(rng.random_range(-token_bound..token_bound)));
        let mut stages = Vec::with_capacity(specs.len());
        for s in &specs {
            let sac = ConvParams::random(s.conv.kernel_volume(), s.conv.in_dim, s.conv.out_dim, rng);
            stages.push(StageParams { sac, cars: cars(s.conv.out_dim, rng) });
        }
        let (cls, decoder, seg) = match cfg.head {
            HeadKind::Mil => {
                let width = *cfg.dims.iter().max().unwrap();
                (Some(Linear::random(width, cfg.num_classes, rng)), Vec::new(), None)
            }
            HeadKind::Unet => {
                let mut dec = Vec::new();
                for (width, conv) in cfg.decoder_specs()? {
                    let c = cars(width, rng);
                    let sac = ConvParams::random(conv.kernel_volume(), conv.in_dim, conv.out_dim, rng);
                    dec.push(DecoderStageParams { cars: c, sac });
                }
                (None, dec, Some(Linear::random(cfg.dims[0], cfg.num_classes, rng)))
            }
        };
        Ok(Self { ctx_token, stages, cls, decoder, seg })
    }
}

/// Gradient accumulator type of the model tape.
pub type ModelTape<'a, T> = Tape<'a, T, ModelParams<T>>;

#[derive(Debug, Clone, Copy)]
enum ConvSlot {
    Encoder(usize),
    Decoder(usize),
}

impl ConvSlot {
    fn get<T>(self, p: &mut ModelParams<T>) -> &mut ConvParams<T> {
        match self {
            ConvSlot::Encoder(l) => &mut p.stages[l].sac,
            ConvSlot::Decoder(l) => &mut p.decoder[l].sac,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum CarSlot {
    Encoder(usize, usize),
    Decoder(usize, usize),
}

impl CarSlot {
    fn get<T>(self, p: &mut ModelParams<T>) -> &mut CarParams<T> {
        match self {
            CarSlot::Encoder(l, j) => &mut p.stages[l].cars[j],
            CarSlot::Decoder(l, j) => &mut p.decoder[l].cars[j],
        }
    }
}

fn stack_rows<T: Scalar>(a: ndarray::ArrayView2<T>, b: ndarray::ArrayView2<T>) -> Array2<T> {
    concatenate(Axis(0), &[a, b]).expect("equal widths")
}

fn sac_op<'a, T: Scalar>(
    tape: &mut ModelTape<'a, T>,
    x: Var,
    rb: Arc<ConvRulebook>,
    params: &'a ConvParams<T>,
    slot: ConvSlot,
) -> Result<Var> {
    let input = tape.value(x).clone();
    let n_in = rb.n_in();
    let (f, c) = (input.slice(s![..n_in, ..]), input.slice(s![n_in.., ..]));
    let (out, ctx) = sac_forward_rows(f, c, &rb, params)?;
    let value = stack_rows(out.view(), ctx.view());
    Ok(tape.op(
        value,
        &[x],
        Box::new(move |g, grads| {
            let n_out = rb.n_out();
            let (f, c) = (input.slice(s![..n_in, ..]), input.slice(s![n_in.., ..]));
            let cg = sac_backward(g.slice(s![..n_out, ..]), g.slice(s![n_out.., ..]), f, c, &rb, params)?;
            let dst = slot.get(grads);
            dst.weight += &cg.weight;
            dst.bias += &cg.bias;
            Ok(vec![stack_rows(cg.input.view(), cg.context.view())])
        }),
    ))
}

fn car_op<'a, T: Scalar>(
    tape: &mut ModelTape<'a, T>,
    x: Var,
    coords: Arc<Vec<Coord>>,
    rbs: Arc<CarRulebooks>,
    params: &'a CarParams<T>,
    slot: CarSlot,
) -> Result<Var> {
    let (y, saved) = car_block_forward_rows(tape.value(x).view(), &coords, &rbs, params)?;
    Ok(tape.op(
        y,
        &[x],
        Box::new(move |g, grads| Ok(vec![car_block_backward(g.view(), &saved, &rbs, params, slot.get(grads))?])),
    ))
}

fn add_ctx_token_op<'a, T: Scalar>(tape: &mut ModelTape<'a, T>, x: Var, n: usize, token: &'a Array2<T>) -> Var {
    let mut value = tape.value(x).clone();
    value.slice_mut(s![n.., ..]).scaled_add(T::one(), token);
    tape.op(
        value,
        &[x],
        Box::new(move |g, grads| {
            grads.ctx_token += &g.slice(s![n.., ..]);
            Ok(vec![g.clone()])
        }),
    )
}

fn linear_op<'a, T: Scalar>(tape: &mut ModelTape<'a, T>, x: Var, lin: &'a Linear<T>, cls: bool) -> Var {
    let input = tape.value(x).clone();
    let value = lin.forward(input.view());
    tape.op(
        value,
        &[x],
        Box::new(move |g, grads| {
            let dst = if cls { grads.cls.as_mut() } else { grads.seg.as_mut() };
            let dst = dst.ok_or_else(|| SpanError::InvalidConfig("gradient buffer lacks head".into()))?;
            Ok(vec![lin.backward(g.view(), input.view(), dst)])
        }),
    )
}

/// Rows `..n` of `x`.
fn take_rows_op<T: Scalar>(tape: &mut ModelTape<'_, T>, x: Var, n: usize) -> Var {
    let full = tape.value(x).dim();
    let value = tape.value(x).slice(s![..n, ..]).to_owned();
    tape.op(
        value,
        &[x],
        Box::new(move |g, _| {
            let mut dx = Array2::zeros(full);
            dx.slice_mut(s![..n, ..]).assign(g);
            Ok(vec![dx])
        }),
    )
}

/// Patch rows then context rows of two same-layout inputs, merged.
fn skip_op<T: Scalar>(tape: &mut ModelTape<'_, T>, up: Var, skip: Var, mode: SkipMode) -> Result<Var> {
    let (a, b) = (tape.value(up), tape.value(skip));
    if a.nrows() != b.nrows() {
        return Err(SpanError::RulebookMismatch(format!("skip rows {} vs {}", a.nrows(), b.nrows())));
    }
    match mode {
        SkipMode::None => Ok(up),
        SkipMode::Add => {
            if a.ncols() != b.ncols() {
                return Err(SpanError::DimensionMismatch(format!("add skip {} vs {}", a.ncols(), b.ncols())));
            }
            let value = a + b;
            Ok(tape.op(value, &[up, skip], Box::new(|g, _| Ok(vec![g.clone(), g.clone()]))))
        }
        SkipMode::Concat => {
            let da = a.ncols();
            let value = concatenate(Axis(1), &[a.view(), b.view()]).expect("equal rows");
            Ok(tape.op(
                value,
                &[up, skip],
                Box::new(move |g, _| Ok(vec![g.slice(s![.., ..da]).to_owned(), g.slice(s![.., da..]).to_owned()])),
            ))
        }
    }
}

/// Sum over stages of each stage's mean context row, zero-padded to
/// `width`; with no context rows, the mean of the last stage's patch rows.
fn pool_op<T: Scalar>(tape: &mut ModelTape<'_, T>, stages: &[StageNode], num_ctx: usize, width: usize) -> Var {
    let mut value = Array2::<T>::zeros((1, width));
    let parents: Vec<Var>;
    let mut layout = Vec::new();
    if num_ctx > 0 {
        parents = stages.iter().map(|s| s.var).collect();
        for s in stages {
            let h = tape.value(s.var);
            let n = s.coords.len();
            let d = h.ncols();
            let m = h.slice(s![n.., ..]).mean_axis(Axis(0)).expect("context rows");
            value.slice_mut(s![0, ..d]).scaled_add(T::one(), &m);
            layout.push((h.dim(), n, d));
        }
    } else {
        let last = stages.last().expect("at least one stage");
        parents = vec![last.var];
        let h = tape.value(last.var);
        let n = last.coords.len();
        let d = h.ncols();
        let m = h.slice(s![..n, ..]).mean_axis(Axis(0)).expect("patch rows");
        value.slice_mut(s![0, ..d]).assign(&m);
        layout.push((h.dim(), n, d));
    }
    let ctx = num_ctx > 0;
    tape.op(
        value,
        &parents,
        Box::new(move |g, _| {
            Ok(layout
                .iter()
                .map(|&(dim, n, d)| {
                    let mut dx = Array2::zeros(dim);
                    let rows = if ctx { n..dim.0 } else { 0..n };
                    let share = T::one() / T::lit(rows.len() as f64);
                    let gd = g.slice(s![0, ..d]).mapv(|v| v * share);
                    for r in rows {
                        dx.row_mut(r).assign(&gd);
                    }
                    dx
                })
                .collect())
        }),
    )
}

/// One encoder stage on the tape.
#[derive(Debug, Clone)]
pub struct StageNode {
    pub var: Var,
    pub coords: Arc<Vec<Coord>>,
    pub conv: Arc<ConvRulebook>,
    pub car: Option<Arc<CarRulebooks>>,
}

/// A recorded forward pass.
pub struct Graph<'a, T: Scalar> {
    pub tape: ModelTape<'a, T>,
    pub input: Var,
    pub stages: Vec<StageNode>,
    /// `1 x classes` for MIL, `N x classes` for UNet.
    pub logits: Var,
}

fn input_rows<T: Scalar>(map: &SparseMap<T>, cfg: &ModelConfig) -> Result<Array2<T>> {
    if map.is_empty() {
        return Err(SpanError::EmptyMap);
    }
    if map.feature_dim() != cfg.in_dim {
        return Err(SpanError::DimensionMismatch(format!(
            "map width {} vs configured input width {}",
            map.feature_dim(),
            cfg.in_dim
        )));
    }
    let c = cfg.effective_num_ctx();
    if map.num_ctx() == c {
        Ok(map.stacked())
    } else if map.num_ctx() == 0 {
        Ok(stack_rows(map.features().view(), Array2::zeros((c, cfg.in_dim)).view()))
    } else {
        Err(SpanError::DimensionMismatch(format!("map has {} context rows, model uses {c}", map.num_ctx())))
    }
}

fn encode<'a, T: Scalar>(
    tape: &mut ModelTape<'a, T>,
    x0: Var,
    coords: &[Coord],
    cfg: &ModelConfig,
    params: &'a ModelParams<T>,
) -> Result<Vec<StageNode>> {
    let specs = cfg.stage_specs()?;
    if params.stages.len() != specs.len() {
        return Err(SpanError::InvalidConfig(format!("{} stage parameter sets for {} stages", params.stages.len(), specs.len())));
    }
    let num_ctx = cfg.effective_num_ctx();
    let mut x = x0;
    let mut cur: Arc<Vec<Coord>> = Arc::new(coords.to_vec());
    let mut out = Vec::with_capacity(specs.len());
    for (l, spec) in specs.iter().enumerate() {
        let rb = Arc::new(build_conv_rulebook(&cur, &spec.conv)?);
        x = sac_op(tape, x, rb.clone(), &params.stages[l].sac, ConvSlot::Encoder(l))?;
        cur = Arc::new(rb.out_coords().to_vec());
        if l == 0 && num_ctx > 0 {
            x = add_ctx_token_op(tape, x, cur.len(), &params.ctx_token);
        }
        let car = if spec.window > 0 && spec.car_pairs > 0 {
            let rbs = Arc::new(CarRulebooks::build(&cur, spec.window, spec.shift, num_ctx)?);
            for j in 0..spec.car_pairs {
                x = car_op(tape, x, cur.clone(), rbs.clone(), &params.stages[l].cars[j], CarSlot::Encoder(l, j))?;
            }
            Some(rbs)
        } else {
            None
        };
        out.push(StageNode { var: x, coords: cur.clone(), conv: rb, car });
    }
    Ok(out)
}

fn decode<'a, T: Scalar>(
    tape: &mut ModelTape<'a, T>,
    stages: &[StageNode],
    cfg: &ModelConfig,
    params: &'a ModelParams<T>,
) -> Result<Var> {
    let l = stages.len();
    if params.decoder.len() != l {
        return Err(SpanError::RulebookMissing(params.decoder.len()));
    }
    let seg = params.seg.as_ref().ok_or_else(|| SpanError::InvalidConfig("segmentation head missing".into()))?;
    let mut x = stages[l - 1].var;
    for i in 0..l {
        let enc = &stages[l - 1 - i];
        if let Some(rbs) = &enc.car {
            for j in 0..cfg.car_pairs {
                x = car_op(tape, x, enc.coords.clone(), rbs.clone(), &params.decoder[i].cars[j], CarSlot::Decoder(i, j))?;
            }
        }
        let t = Arc::new(enc.conv.transpose());
        x = sac_op(tape, x, t, &params.decoder[i].sac, ConvSlot::Decoder(i))?;
        if i + 1 < l {
            x = skip_op(tape, x, stages[l - 2 - i].var, cfg.skip)?;
        }
    }
    let n = stages[0].conv.n_in();
    let patches = take_rows_op(tape, x, n);
    Ok(linear_op(tape, patches, seg, false))
}

/// Records the full forward pass for `map`.
pub fn forward<'a, T: Scalar>(cfg: &ModelConfig, params: &'a ModelParams<T>, map: &SparseMap<T>) -> Result<Graph<'a, T>> {
    let mut tape = Tape::new();
    let input = tape.leaf(input_rows(map, cfg)?);
    let stages = encode(&mut tape, input, map.coords(), cfg, params)?;
    let logits = match cfg.head {
        HeadKind::Mil => {
            let cls = params.cls.as_ref().ok_or_else(|| SpanError::InvalidConfig("classifier missing".into()))?;
            let pooled = pool_op(&mut tape, &stages, cfg.effective_num_ctx(), cls.weight.nrows());
            linear_op(&mut tape, pooled, cls, true)
        }
        HeadKind::Unet => decode(&mut tape, &stages, cfg, params)?,
    };
    Ok(Graph { tape, input, stages, logits })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    /// Per-patch class in canonical coordinate order.
    Mask(Vec<usize>),
    /// Discrete-time survival bin and censoring flag.
    Survival { bin: usize, censored: bool },
}

/// Loss value and gradient with respect to the logits.
pub fn head_loss<T: Scalar>(cfg: &ModelConfig, logits: &Array2<T>, target: &Target) -> Result<(T, Array2<T>)> {
    match target {
        Target::Class(y) => loss::ce_from_logits(logits.view(), &[*y]),
        Target::Mask(m) => loss::hybrid_from_logits(logits.view(), m, &cfg.loss),
        Target::Survival { bin, censored } => loss::survival_nll_with_grad(logits.view(), &[*bin], &[*censored]),
    }
}

/// Forward, loss and backward for one map.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub logits: Array2<T>,
    pub grads: ModelParams<T>,
    /// Gradient with respect to the stacked input rows.
    pub input_grad: Array2<T>,
}

pub fn loss_and_grad<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    map: &SparseMap<T>,
    target: &Target,
) -> Result<StepOutput<T>> {
    let graph = forward(cfg, params, map)?;
    let logits = graph.tape.value(graph.logits).clone();
    let (loss, dlogits) = head_loss(cfg, &logits, target)?;
    let mut grads = crate::autodiff::zeros_like(params);
    let adj = graph.tape.backward(graph.logits, dlogits, &mut grads)?;
    let input_grad = adj[graph.input.index()].clone().unwrap_or_else(|| Array2::zeros(graph.tape.value(graph.input).dim()));
    Ok(StepOutput { loss, logits, grads, input_grad })
}

/// Loss only.
pub fn loss_value<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>, map: &SparseMap<T>, target: &Target) -> Result<T> {
    let graph = forward(cfg, params, map)?;
    head_loss(cfg, graph.tape.value(graph.logits), target).map(|(l, _)| l)
}

/// Per-stage state of the backbone.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    pub stage_maps: Vec<SparseMap<T>>,
    pub stage_globals: Vec<Array2<T>>,
    pub stage_rulebooks: Vec<Arc<ConvRulebook>>,
    car_rulebooks: Vec<Option<Arc<CarRulebooks>>>,
}

pub fn encoder_forward<T: Scalar>(map: &SparseMap<T>, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<EncoderOutput<T>> {
    let mut tape = Tape::new();
    let input = tape.leaf(input_rows(map, cfg)?);
    let stages = encode(&mut tape, input, map.coords(), cfg, params)?;
    let mut out = EncoderOutput { stage_maps: Vec::new(), stage_globals: Vec::new(), stage_rulebooks: Vec::new(), car_rulebooks: Vec::new() };
    for s in stages {
        let h = tape.value(s.var);
        let m = SparseMap::from_stacked(s.coords.to_vec(), h.view())?;
        out.stage_globals.push(m.context().clone());
        out.stage_maps.push(m);
        out.stage_rulebooks.push(s.conv);
        out.car_rulebooks.push(s.car);
    }
    Ok(out)
}

/// Class probabilities from the summed per-stage context rows.
pub fn mil_head<T: Scalar>(enc: &EncoderOutput<T>, params: &ModelParams<T>) -> Result<Array1<T>> {
    let cls = params.cls.as_ref().ok_or_else(|| SpanError::InvalidConfig("classifier missing".into()))?;
    let width = cls.weight.nrows();
    let mut h = Array2::<T>::zeros((1, width));
    for g in &enc.stage_globals {
        if g.nrows() == 0 {
            return Err(SpanError::MissingContext);
        }
        let m = g.mean_axis(Axis(0)).expect("context rows");
        h.slice_mut(s![0, ..g.ncols()]).scaled_add(T::one(), &m);
    }
    let probs = loss::softmax_rows(cls.forward(h.view()).view());
    Ok(probs.row(0).to_owned())
}

/// Per-patch logits at the input coordinates.
pub fn unet_decode<T: Scalar>(enc: &EncoderOutput<T>, cfg: &ModelConfig, params: &ModelParams<T>) -> Result<SparseMap<T>> {
    if enc.stage_rulebooks.len() != enc.stage_maps.len() || enc.stage_maps.is_empty() {
        return Err(SpanError::RulebookMissing(enc.stage_rulebooks.len()));
    }
    let mut tape = Tape::new();
    let stages: Vec<StageNode> = enc
        .stage_maps
        .iter()
        .zip(&enc.stage_rulebooks)
        .zip(&enc.car_rulebooks)
        .map(|((m, rb), car)| StageNode {
            var: tape.leaf(m.stacked()),
            coords: Arc::new(m.coords().to_vec()),
            conv: rb.clone(),
            car: car.clone(),
        })
        .collect();
    let logits = decode(&mut tape, &stages, cfg, params)?;
    let coords = stages[0].conv.in_coords().to_vec();
    SparseMap::from_stacked(coords, tape.value(logits).view())
}

/// Inference result.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<T> {
    Class(Array1<T>),
    Segmentation(SparseMap<T>),
}

pub fn predict<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>, map: &SparseMap<T>) -> Result<Prediction<T>> {
    let graph = forward(cfg, params, map)?;
    let logits = graph.tape.value(graph.logits);
    match cfg.head {
        HeadKind::Mil => Ok(Prediction::Class(loss::softmax_rows(logits.view()).row(0).to_owned())),
        HeadKind::Unet => Ok(Prediction::Segmentation(SparseMap::from_stacked(map.coords().to_vec(), logits.view())?)),
    }
}
