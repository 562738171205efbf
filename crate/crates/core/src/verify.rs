//! Runtime oracle suite: fast kernels against dense references, fast
//! rulebooks against exhaustive enumeration, and analytic gradients against
//! central differences.

use crate::attention::{
    attention_backward, attention_forward, attention_forward_saved, build_attention_rulebook, car_block_backward,
    car_block_forward_rows, AttnParams, CarParams, CarRulebooks, Shift,
};
use crate::autodiff::{grad_check, zeros_like, GradCheckConfig, Parameters};
use crate::conv::{build_conv_rulebook, sac_backward, sac_forward, sac_forward_rows, ConvParams, ConvSpec};
use crate::error::{Result, SpanError};
use crate::layers::{FeedForward, LayerNorm, Linear};
use crate::model::{loss_and_grad, loss_value, HeadKind, ModelConfig, ModelParams, Target};
use crate::oracles::{
    attention_masks, brute_force_attn_rulebook, brute_force_conv_rulebook, dense_attention_oracle, dense_conv_oracle,
    DenseTensor,
};
use crate::sparse::{build_sparse_map, Coord, SparseMap};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

pub const CONV_TOL_F32: f64 = 1e-5;
pub const CONV_TOL_F64: f64 = 1e-10;
pub const ATTN_TOL: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Deliberate corruption of one path, used as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    Conv,
    Attention,
    Rulebook,
    Gradient,
}

impl FromStr for Fault {
    type Err = SpanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Self::Conv),
            "attention" => Ok(Self::Attention),
            "rulebook" => Ok(Self::Rulebook),
            "gradient" => Ok(Self::Gradient),
            _ => Err(SpanError::InvalidConfig(format!("unknown fault {s:?}; expected conv, attention, rulebook or gradient"))),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Conv => "conv",
            Self::Attention => "attention",
            Self::Rulebook => "rulebook",
            Self::Gradient => "gradient",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub conv_trials: usize,
    pub attn_trials: usize,
    pub rulebook_trials: usize,
    /// Random instances per gradient-checked operation.
    pub grad_trials: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 0, conv_trials: 200, attn_trials: 100, rulebook_trials: 200, grad_trials: 3, fault: None }
    }
}

impl VerifyConfig {
    /// Same instance count for every check.
    pub fn uniform(seed: u64, trials: usize) -> Self {
        Self { seed, conv_trials: trials, attn_trials: trials, rulebook_trials: trials, grad_trials: trials, fault: None }
    }

    pub fn is_vacuous(&self) -> bool {
        self.conv_trials + self.attn_trials + self.rulebook_trials + self.grad_trials == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Absolute error for equivalences, relative error for gradients,
    /// mismatch count for rulebooks.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, instances: usize, max_error: f64, tolerance: f64, strict: bool) -> Self {
        let passed = if strict { max_error <= tolerance } else { max_error < tolerance };
        Self { name: name.into(), instances, max_error, tolerance, passed }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} instances={} max_error={:.3e} tolerance={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.tolerance
        )
    }
}

fn random_coords<R: Rng>(rng: &mut R, n: usize, h: u32, w: u32) -> Vec<Coord> {
    let n = n.min((h * w) as usize);
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert(Coord::new(rng.random_range(0..w), rng.random_range(0..h)));
    }
    set.into_iter().collect()
}

fn random_map<R: Rng>(rng: &mut R, coords: Vec<Coord>, d: usize, num_ctx: usize) -> SparseMap<f64> {
    let feats = Array2::from_shape_fn((coords.len(), d), |_| rng.random_range(-1.0..1.0));
    let ctx = Array2::from_shape_fn((num_ctx, d), |_| rng.random_range(-1.0..1.0));
    build_sparse_map(coords, feats, 0).and_then(|m| m.with_context(ctx)).expect("valid random map")
}

fn random_conv_spec<R: Rng>(rng: &mut R) -> ConvSpec {
    let k = rng.random_range(1..=3);
    let s = rng.random_range(1..=2);
    let d = rng.random_range(1..=2);
    ConvSpec::new(k, s, d, rng.random_range(1..=8), rng.random_range(1..=8)).expect("valid spec")
}

fn perturb<T: crate::scalar::Scalar>(a: &mut Array2<T>) {
    a[[0, 0]] += T::lit(1e-3);
}

/// Sparse convolution against the dense reference at every active output.
fn conv_equivalence<T: crate::scalar::Scalar>(cfg: &VerifyConfig, name: &str, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0);
    let mut worst = 0.0f64;
    for _ in 0..cfg.conv_trials {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let n = rng.random_range(1..=(h * w) as usize);
        let coords = random_coords(&mut rng, n, h, w);
        let spec = random_conv_spec(&mut rng);
        let map = random_map(&mut rng, coords, spec.in_dim, 0).cast::<T>();
        let params = ConvParams::<f64>::random(spec.kernel_volume(), spec.in_dim, spec.out_dim, &mut rng);
        let mut params = ConvParams { weight: params.weight.mapv(T::lit), bias: params.bias.mapv(T::lit) };
        params.bias.mapv_inplace(|_| T::lit(rng.random_range(-1.0..1.0)));
        let rb = build_conv_rulebook(map.coords(), &spec)?;
        let mut fast_params = params.clone();
        if cfg.fault == Some(Fault::Conv) {
            perturb(&mut fast_params.weight);
        }
        let sparse = sac_forward(&map, &rb, &fast_params)?;
        // pad so every sparse output has a full receptive field in the grid
        let reach = ((spec.kernel - 1) * spec.dilation) as usize;
        let dense = DenseTensor::from_map(&map, h as usize + reach, w as usize + reach)?;
        let out = dense_conv_oracle(&dense, &spec, &params)?;
        for (c, row) in sparse.coords().iter().zip(sparse.features().rows()) {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((v.as_f64() - out[[c.y as usize, c.x as usize, j]].as_f64()).abs());
            }
        }
    }
    Ok(CheckResult::new(name, cfg.conv_trials, worst, tol, false))
}

/// Rulebook-driven attention in single precision against the dense masked
/// reference evaluated in double precision on the same inputs.
fn attention_equivalence(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa7);
    let mut worst = 0.0f64;
    for _ in 0..cfg.attn_trials {
        let n = rng.random_range(1..=64);
        let coords = random_coords(&mut rng, n, 12, 12);
        let w = if rng.random_bool(0.5) { 2 } else { 4 };
        let shift = if rng.random_bool(0.5) { Shift::None } else { Shift::Half };
        let heads = if rng.random_bool(0.5) { 1 } else { 4 };
        let num_ctx = rng.random_range(0..=1);
        let d = 8;
        let mut p = AttnParams::<f64>::random(d, heads, w, &mut rng);
        p.rpb.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        for b in [&mut p.bq, &mut p.bk, &mut p.bv, &mut p.bo] {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let rows = coords.len() + num_ctx;
        let h = Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0));
        let p32 = cast_attn::<f32>(&p);
        let h32 = h.mapv(|v| v as f32);
        // the reference sees exactly the values the fast path sees
        let p64 = cast_attn::<f64>(&p32);
        let h64 = h32.mapv(|v| v as f64);
        let mut fast_params = p32.clone();
        if cfg.fault == Some(Fault::Attention) {
            perturb(&mut fast_params.wo);
        }
        let rb = build_attention_rulebook(&coords, w, shift, num_ctx)?;
        let fast = attention_forward(h32.view(), &coords, &rb, &fast_params)?;
        let brute = brute_force_attn_rulebook(&coords, w, shift, num_ctx)?;
        let (ml, mg) = attention_masks(rows, &brute.local, &brute.global);
        let slow = dense_attention_oracle(&h64, &coords, &ml, &mg, &p64)?;
        for (a, b) in fast.iter().zip(slow.iter()) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    Ok(CheckResult::new("attention_equivalence_f32", cfg.attn_trials, worst, ATTN_TOL, false))
}

fn cast_attn<U: crate::scalar::Scalar>(p: &AttnParams<impl crate::scalar::Scalar>) -> AttnParams<U> {
    let m = |a: &Array2<_>| a.mapv(|v: _| U::lit(crate::scalar::Scalar::as_f64(v)));
    let v = |a: &Array1<_>| a.mapv(|v: _| U::lit(crate::scalar::Scalar::as_f64(v)));
    let mut out = AttnParams::<U>::zeros(p.dim(), p.num_heads, p.rpb.w_side);
    out.wq = m(&p.wq);
    out.wk = m(&p.wk);
    out.wv = m(&p.wv);
    out.wo = m(&p.wo);
    out.bq = v(&p.bq);
    out.bk = v(&p.bk);
    out.bv = v(&p.bv);
    out.bo = v(&p.bo);
    out.rpb.bias = m(&p.rpb.bias);
    out
}

/// Counts entries present in exactly one of the fast and exhaustive sets.
fn rulebook_equality(cfg: &VerifyConfig) -> Result<(CheckResult, CheckResult)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7b);
    let (mut conv_bad, mut attn_bad) = (0usize, 0usize);
    for _ in 0..cfg.rulebook_trials {
        let extent = rng.random_range(1..=24);
        let n = rng.random_range(1..=200);
        let coords = random_coords(&mut rng, n, extent, extent);
        let spec = random_conv_spec(&mut rng);
        let fast = build_conv_rulebook(&coords, &spec)?;
        let brute = brute_force_conv_rulebook(&coords, &spec)?;
        let mut fast_pairs: BTreeSet<(usize, u32, u32)> = (0..fast.kernel_volume())
            .flat_map(|k| fast.pairs(k).iter().map(move |&(i, o)| (k, i, o)))
            .collect();
        if cfg.fault == Some(Fault::Rulebook) {
            let first = fast_pairs.iter().next().copied();
            if let Some(p) = first {
                fast_pairs.remove(&p);
            }
        }
        if fast.out_coords() != &brute.out_coords[..] {
            conv_bad += 1;
        }
        conv_bad += fast_pairs.symmetric_difference(&brute.pairs).count();

        let w = rng.random_range(1..=4) * if rng.random_bool(0.5) { 1 } else { 2 };
        let shift = if w % 2 == 0 && rng.random_bool(0.5) { Shift::Half } else { Shift::None };
        let num_ctx = rng.random_range(0..=2);
        let fast = build_attention_rulebook(&coords, w, shift, num_ctx)?;
        let brute = brute_force_attn_rulebook(&coords, w, shift, num_ctx)?;
        let local: BTreeSet<_> = fast.local_pairs().into_iter().collect();
        let global: BTreeSet<_> = fast.global_pairs().into_iter().collect();
        attn_bad += local.symmetric_difference(&brute.local).count();
        attn_bad += global.symmetric_difference(&brute.global).count();
        // the fast lists must not hold duplicates either
        attn_bad += fast.local_pair_count() - local.len() + fast.global_pair_count() - global.len();
    }
    Ok((
        CheckResult::new("conv_rulebook_set_equality", cfg.rulebook_trials, conv_bad as f64, 0.0, true),
        CheckResult::new("attention_rulebook_set_equality", cfg.rulebook_trials, attn_bad as f64, 0.0, true),
    ))
}

/// Weighted-sum readout: `loss = sum(R * y)`, so `dL/dy = R`.
fn readout(y: &Array2<f64>, r: &Array2<f64>) -> f64 {
    (y * r).sum()
}

fn gc_cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig { seed, ..Default::default() }
}

fn maybe_corrupt<P: Parameters<f64>>(cfg: &VerifyConfig, analytic: &mut P) {
    if cfg.fault == Some(Fault::Gradient) {
        analytic.visit_mut("", &mut |_, mut a| a.mapv_inplace(|v| v * 1.01));
    }
}

fn grad_checks(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9d);
    let t = cfg.grad_trials;
    let mut worst = std::collections::BTreeMap::<&'static str, f64>::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for trial in 0..t {
        let seed = cfg.seed.wrapping_add(trial as u64);
        let n = rng.random_range(2..=20);
        let d = 4;
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));

        // linear
        let lin = Linear::<f64>::random(d, 3, &mut rng);
        let lin = Linear { bias: Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)), ..lin };
        let r = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let mut g = Linear::zeros(d, 3);
        let dx = lin.backward(r.view(), x.view(), &mut g);
        let mut analytic = (g, dx);
        maybe_corrupt(cfg, &mut analytic);
        let rep = grad_check(&(lin, x.clone()), &analytic, |(l, x)| readout(&l.forward(x.view()), &r), &gc_cfg(seed));
        note("grad_linear", rep.max_rel_error);

        // layer norm
        let mut ln = LayerNorm::<f64>::new(d);
        ln.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        ln.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let r = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let (_, saved) = ln.forward(x.view());
        let mut g = LayerNorm::zeros(d);
        let dx = ln.backward(r.view(), &saved, &mut g);
        let rep = grad_check(&(ln, x.clone()), &(g, dx), |(l, x)| readout(&l.forward(x.view()).0, &r), &gc_cfg(seed));
        note("grad_layer_norm", rep.max_rel_error);

        // feed-forward
        let ffn = FeedForward::<f64>::random(d, 4 * d, &mut rng);
        let (_, saved) = ffn.forward(x.view());
        let mut g = FeedForward::zeros(d, 4 * d);
        let dx = ffn.backward(r.view(), &saved, &mut g);
        let rep = grad_check(&(ffn, x.clone()), &(g, dx), |(f, x)| readout(&f.forward(x.view()).0, &r), &gc_cfg(seed));
        note("grad_feed_forward", rep.max_rel_error);

        // sparse convolution, context included
        let coords = random_coords(&mut rng, n, 6, 6);
        let spec = random_conv_spec(&mut rng);
        let map = random_map(&mut rng, coords.clone(), spec.in_dim, 1);
        let rb = build_conv_rulebook(map.coords(), &spec)?;
        let mut conv = ConvParams::<f64>::random(spec.kernel_volume(), spec.in_dim, spec.out_dim, &mut rng);
        conv.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let (y, yc) = sac_forward_rows(map.features().view(), map.context().view(), &rb, &conv)?;
        let r = Array2::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let rc = Array2::from_shape_fn(yc.dim(), |_| rng.random_range(-1.0..1.0));
        let g = sac_backward(r.view(), rc.view(), map.features().view(), map.context().view(), &rb, &conv)?;
        let point = (conv, (map.features().clone(), map.context().clone()));
        let analytic = (ConvParams { weight: g.weight, bias: g.bias }, (g.input, g.context));
        let rep = grad_check(
            &point,
            &analytic,
            |(p, (f, c))| {
                let (y, yc) = sac_forward_rows(f.view(), c.view(), &rb, p).expect("shapes fixed");
                readout(&y, &r) + readout(&yc, &rc)
            },
            &gc_cfg(seed),
        );
        note("grad_sparse_conv", rep.max_rel_error);

        // attention with context and bias table
        let coords = random_coords(&mut rng, n, 6, 6);
        let (w, heads, num_ctx) = (2, 2, 1);
        let mut attn = AttnParams::<f64>::random(d, heads, w, &mut rng);
        attn.rpb.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let rows = coords.len() + num_ctx;
        let h = Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0));
        let shift = if trial % 2 == 0 { Shift::Half } else { Shift::None };
        let rb = build_attention_rulebook(&coords, w, shift, num_ctx)?;
        let (_, saved) = attention_forward_saved(h.view(), &coords, &rb, &attn)?;
        let g = attention_backward(r.view(), &saved, &rb, &attn)?;
        let rep = grad_check(
            &(attn, h.clone()),
            &(g.params, g.input),
            |(p, h)| readout(&attention_forward(h.view(), &coords, &rb, p).expect("shapes fixed"), &r),
            &gc_cfg(seed),
        );
        note("grad_attention", rep.max_rel_error);

        // CAR block
        let car = {
            let mut c = CarParams::<f64>::random(d, heads, w, 2, &mut rng);
            c.visit_mut("", &mut |name, mut a| {
                if name.ends_with("rpb") {
                    a.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                }
            });
            c
        };
        let rbs = CarRulebooks::build(&coords, w, true, num_ctx)?;
        let (_, saved) = car_block_forward_rows(h.view(), &coords, &rbs, &car)?;
        let mut g = zeros_like(&car);
        let dx = car_block_backward(r.view(), &saved, &rbs, &car, &mut g)?;
        let rep = grad_check(
            &(car, h.clone()),
            &(g, dx),
            |(p, h)| readout(&car_block_forward_rows(h.view(), &coords, &rbs, p).expect("shapes fixed").0, &r),
            &gc_cfg(seed),
        );
        note("grad_car_block", rep.max_rel_error);

        // full models
        for head in [HeadKind::Mil, HeadKind::Unet] {
            let mcfg = ModelConfig { in_dim: 3, dims: vec![4, 8, 8], heads: 2, window: 2, head, ..Default::default() };
            let mut params = ModelParams::<f64>::init(&mcfg, &mut rng)?;
            params.visit_mut("", &mut |name, mut a| {
                if name.ends_with("rpb") {
                    a.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                }
            });
            let coords = random_coords(&mut rng, n, 7, 7);
            let map = random_map(&mut rng, coords, 3, 0);
            let target = match head {
                HeadKind::Mil => Target::Class(trial % 2),
                HeadKind::Unet => Target::Mask((0..map.len()).map(|i| (i % 3 == 0) as usize).collect()),
            };
            let step = loss_and_grad(&mcfg, &params, &map, &target)?;
            let rep = grad_check(&params, &step.grads, |q| loss_value(&mcfg, q, &map, &target).expect("valid"), &gc_cfg(seed));
            note(if head == HeadKind::Mil { "grad_span_mil" } else { "grad_span_unet" }, rep.max_rel_error);
        }
    }
    let names = [
        "grad_linear",
        "grad_layer_norm",
        "grad_feed_forward",
        "grad_sparse_conv",
        "grad_attention",
        "grad_car_block",
        "grad_span_mil",
        "grad_span_unet",
    ];
    Ok(names
        .iter()
        .map(|n| CheckResult::new(n, t, worst.get(n).copied().unwrap_or(0.0), GRAD_TOL, false))
        .collect())
}

/// Runs every check. Errors only on internal failures; a numerical mismatch
/// is reported through [`CheckResult::passed`].
pub fn run_suite(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        conv_equivalence::<f32>(cfg, "conv_equivalence_f32", CONV_TOL_F32)?,
        conv_equivalence::<f64>(cfg, "conv_equivalence_f64", CONV_TOL_F64)?,
        attention_equivalence(cfg)?,
    ];
    let (c, a) = rulebook_equality(cfg)?;
    out.extend([c, a]);
    out.extend(grad_checks(cfg)?);
    Ok(out)
}

/// Suite pieces by name, for callers that time or report them separately.
pub mod checks {
    use super::*;

    pub fn conv(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
        Ok(vec![
            conv_equivalence::<f32>(cfg, "conv_equivalence_f32", CONV_TOL_F32)?,
            conv_equivalence::<f64>(cfg, "conv_equivalence_f64", CONV_TOL_F64)?,
        ])
    }

    pub fn attention(cfg: &VerifyConfig) -> Result<CheckResult> {
        attention_equivalence(cfg)
    }

    pub fn rulebooks(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
        rulebook_equality(cfg).map(|(a, b)| vec![a, b])
    }

    pub fn gradients(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
        grad_checks(cfg)
    }
}
