//! Reverse-mode scaffolding: named parameter traversal, a parameter store
//! with Adam moments, an operation tape and a central-difference checker.
//!
//! Parameter containers are plain structs. [`Parameters`] walks their
//! tensors in a fixed declaration order with dotted names, so a gradient
//! buffer is simply a second value of the same type.

use crate::error::{Result, SpanError};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal over every trainable tensor of a container.
pub trait Parameters<T: Scalar>: Clone {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'s, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>));
}

/// Implements [`Parameters`] for a struct generic over the scalar by
/// listing its tensor-bearing fields in order.
#[macro_export]
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::autodiff::Parameters<T> for $ty<T> {
            fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, $crate::ndarray::ArrayViewD<'s, T>)) {
                $( $crate::autodiff::Parameters::visit(&self.$field, &$crate::autodiff::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, $crate::ndarray::ArrayViewMutD<'_, T>)) {
                $( $crate::autodiff::Parameters::visit_mut(&mut self.$field, &$crate::autodiff::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

impl<T: Scalar> Parameters<T> for Array1<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'s, T>)) {
        f(prefix, self.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(prefix, self.view_mut().into_dyn());
    }
}

impl<T: Scalar> Parameters<T> for Array2<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'s, T>)) {
        f(prefix, self.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(prefix, self.view_mut().into_dyn());
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'s, T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Option<P> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'s, T>)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

impl<T: Scalar, A: Parameters<T>, B: Parameters<T>> Parameters<T> for (A, B) {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'s, T>)) {
        self.0.visit(&join(prefix, "0"), f);
        self.1.visit(&join(prefix, "1"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.0.visit_mut(&join(prefix, "0"), f);
        self.1.visit_mut(&join(prefix, "1"), f);
    }
}

/// `(name, shape)` of every tensor in visiting order.
pub fn param_shapes<T: Scalar, P: Parameters<T>>(p: &P) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, a| out.push((name.to_string(), a.shape().to_vec())));
    out
}

pub fn param_count<T: Scalar, P: Parameters<T>>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, a| n += a.len());
    n
}

/// All values in visiting order, each tensor in logical row-major order.
pub fn flatten<T: Scalar, P: Parameters<T>>(p: &P) -> Vec<T> {
    let mut out = Vec::new();
    p.visit("", &mut |_, a| out.extend(a.iter().copied()));
    out
}

/// Inverse of [`flatten`] for a container of the same layout.
pub fn assign_flat<T: Scalar, P: Parameters<T>>(p: &mut P, values: &[T]) -> Result<()> {
    let total = param_count(p);
    if values.len() != total {
        return Err(SpanError::DimensionMismatch(format!("{} values for {total} parameters", values.len())));
    }
    let mut pos = 0;
    p.visit_mut("", &mut |_, mut a| {
        for v in a.iter_mut() {
            *v = values[pos];
            pos += 1;
        }
    });
    Ok(())
}

pub fn zeros_like<T: Scalar, P: Parameters<T>>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, mut a| a.fill(T::zero()));
    z
}

/// `dst += src` for two containers of the same layout.
pub fn accumulate<T: Scalar, P: Parameters<T>>(dst: &mut P, src: &P) {
    let flat = flatten(src);
    let mut pos = 0;
    dst.visit_mut("", &mut |_, mut a| {
        for v in a.iter_mut() {
            *v += flat[pos];
            pos += 1;
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Parameter values, gradient buffers and Adam moments.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar, P: Parameters<T>> {
    pub values: P,
    pub grads: P,
    first: Vec<T>,
    second: Vec<T>,
    frozen: HashSet<String>,
    step: u64,
}

impl<T: Scalar, P: Parameters<T>> ParamStore<T, P> {
    pub fn new(values: P) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in param_shapes(&values) {
            if !seen.insert(name.clone()) {
                return Err(SpanError::InvalidConfig(format!("duplicate parameter name {name}")));
            }
        }
        let n = param_count(&values);
        Ok(Self {
            grads: zeros_like(&values),
            values,
            first: vec![T::zero(); n],
            second: vec![T::zero(); n],
            frozen: HashSet::new(),
            step: 0,
        })
    }

    /// Excludes every tensor whose name satisfies `pred` from updates.
    pub fn freeze(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, _) in param_shapes(&self.values) {
            if pred(&name) {
                self.frozen.insert(name);
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.grads.visit_mut("", &mut |_, mut a| a.fill(T::zero()));
    }

    pub fn names(&self) -> Vec<String> {
        param_shapes(&self.values).into_iter().map(|(n, _)| n).collect()
    }

    /// One bias-corrected Adam update from the current gradient buffers.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let g = flatten(&self.grads);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::one() - T::lit(cfg.beta1.powi(t));
        let c2 = T::one() - T::lit(cfg.beta2.powi(t));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        let (m, v, frozen) = (&mut self.first, &mut self.second, &self.frozen);
        let mut pos = 0;
        self.values.visit_mut("", &mut |name, mut a| {
            let skip = frozen.contains(name);
            for w in a.iter_mut() {
                if !skip {
                    let gi = g[pos];
                    m[pos] = b1 * m[pos] + (T::one() - b1) * gi;
                    v[pos] = b2 * v[pos] + (T::one() - b2) * gi * gi;
                    let mh = m[pos] / c1;
                    let vh = v[pos] / c2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                }
                pos += 1;
            }
        });
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the node's output gradient to one gradient per parent, adding any
/// parameter gradients into the accumulator `G`.
pub type BackwardFn<'a, T, G> = Box<dyn Fn(&Array2<T>, &mut G) -> Result<Vec<Array2<T>>> + 'a>;

struct Node<'a, T, G> {
    value: Array2<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<'a, T, G>>,
}

/// Forward record of matrix-valued operations. Each op keeps whatever it
/// saved inside its backward closure.
pub struct Tape<'a, T, G> {
    nodes: Vec<Node<'a, T, G>>,
}

impl<T, G> Default for Tape<'_, T, G> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<'a, T: Scalar, G> Tape<'a, T, G> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn op(&mut self, value: Array2<T>, parents: &[Var], backward: BackwardFn<'a, T, G>) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { value, parents: parents.iter().map(|p| p.0).collect(), backward: Some(backward) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Replays the tape in reverse from `root`, seeded with `seed`.
    /// Parameter gradients accumulate into `grads` (they are not zeroed).
    /// Returns the adjoint of every node that received one.
    pub fn backward(&self, root: Var, seed: Array2<T>, grads: &mut G) -> Result<Vec<Option<Array2<T>>>> {
        if self.nodes.is_empty() {
            return Err(SpanError::EmptyTape);
        }
        if seed.dim() != self.nodes[root.0].value.dim() {
            return Err(SpanError::DimensionMismatch(format!(
                "seed {:?} vs root {:?}",
                seed.dim(),
                self.nodes[root.0].value.dim()
            )));
        }
        let mut adj: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let (Some(back), Some(g)) = (&node.backward, adj[i].as_ref()) else {
                continue;
            };
            let parent_grads = back(g, grads)?;
            if parent_grads.len() != node.parents.len() {
                return Err(SpanError::DimensionMismatch(format!(
                    "op {i} returned {} gradients for {} parents",
                    parent_grads.len(),
                    node.parents.len()
                )));
            }
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut adj[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(adj)
    }
}

/// Scalar-valued convenience: backward with seed `[[1]]` on a 1x1 root.
pub fn backward_scalar<T: Scalar, G>(tape: &Tape<'_, T, G>, root: Var, grads: &mut G) -> Result<Vec<Option<Array2<T>>>> {
    tape.backward(root, Array2::from_elem((1, 1), T::one()), grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub coords_per_param: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator `|a| + |n|`. Below it
    /// the error is effectively absolute, since finite differences cannot
    /// resolve derivatives much smaller than their roundoff.
    pub denom_floor: f64,
    /// Five-point stencil (error O(eps^4)) instead of the two-point one.
    pub five_point: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 3e-4, coords_per_param: 200, seed: 0, denom_floor: 1e-6, five_point: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(name, max relative error)` per tensor.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares `analytic` against central differences of `loss` on a random
/// subset of up to `coords_per_param` coordinates of each tensor.
pub fn grad_check<P: Parameters<f64>>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let shapes = param_shapes(params);
    let grads = flatten(analytic);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut offset = 0;
    let mut per_param = Vec::with_capacity(shapes.len());
    let mut checked = 0;
    for (t, (name, shape)) in shapes.iter().enumerate() {
        let len: usize = shape.iter().product();
        let picks: Vec<usize> = if len <= cfg.coords_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, cfg.coords_per_param).into_vec()
        };
        let mut worst = 0.0f64;
        for &k in &picks {
            let h = cfg.eps;
            let mut at = |delta: f64| {
                nudge(&mut probe, t, k, delta);
                let v = loss(&probe);
                nudge(&mut probe, t, k, -delta);
                v
            };
            let numeric = if cfg.five_point {
                (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
            } else {
                (at(h) - at(-h)) / (2.0 * h)
            };
            let a = grads[offset + k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(cfg.denom_floor);
            worst = worst.max(rel);
        }
        checked += picks.len();
        offset += len;
        per_param.push((name.clone(), worst));
    }
    let max_rel_error = per_param.iter().map(|p| p.1).fold(0.0, f64::max);
    GradCheckReport { max_rel_error, per_param, coords_checked: checked }
}

fn nudge<P: Parameters<f64>>(p: &mut P, tensor: usize, k: usize, delta: f64) {
    let mut t = 0;
    p.visit_mut("", &mut |_, mut a| {
        if t == tensor {
            if let Some(v) = a.iter_mut().nth(k) {
                *v += delta;
            }
        }
        t += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[derive(Debug, Clone)]
    struct Pair<T> {
        a: Array2<T>,
        b: Array1<T>,
    }
    crate::impl_parameters!(Pair { a, b });

    fn pair() -> Pair<f64> {
        Pair { a: array![[1.0, -2.0], [0.5, 3.0]], b: array![0.25, -1.0] }
    }

    #[test]
    fn names_follow_declaration_order() {
        let p = vec![pair(), pair()];
        let names: Vec<String> = param_shapes::<f64, _>(&p).into_iter().map(|n| n.0).collect();
        assert_eq!(names, ["0.a", "0.b", "1.a", "1.b"]);
        assert_eq!(param_count::<f64, _>(&p), 12);
    }

    #[test]
    fn flat_round_trip() {
        let p = pair();
        let mut q = zeros_like(&p);
        assign_flat(&mut q, &flatten(&p)).unwrap();
        assert_eq!(q.a, p.a);
        assert_eq!(q.b, p.b);
        assert!(assign_flat(&mut q, &[1.0]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let dup = (array![1.0f64], array![2.0f64]);
        assert!(ParamStore::new(dup).is_ok());
        #[derive(Clone)]
        struct Twice<T>(Array1<T>);
        impl<T: Scalar> Parameters<T> for Twice<T> {
            fn visit<'s>(&'s self, _: &str, f: &mut dyn FnMut(&str, ArrayViewD<'s, T>)) {
                f("x", self.0.view().into_dyn());
                f("x", self.0.view().into_dyn());
            }
            fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
                f("x", self.0.view_mut().into_dyn());
            }
        }
        assert!(ParamStore::new(Twice(array![1.0f64])).is_err());
    }

    type Grad = Array2<f64>;

    /// `loss = 0.5 * sum(p^2)` recorded on a tape.
    fn quadratic<'a>(tape: &mut Tape<'a, f64, Grad>, p: &'a Array2<f64>) -> Var {
        let x = tape.leaf(p.clone());
        let value = Array2::from_elem((1, 1), 0.5 * p.iter().map(|v| v * v).sum::<f64>());
        tape.op(
            value,
            &[x],
            Box::new(move |g, acc: &mut Grad| {
                let dp = p * g[[0, 0]];
                *acc += &dp;
                Ok(vec![dp])
            }),
        )
    }

    #[test]
    fn quadratic_gradient_is_p() {
        let p = array![[1.0, -2.0, 0.5]];
        let mut tape = Tape::new();
        let root = quadratic(&mut tape, &p);
        let mut g = Array2::zeros((1, 3));
        let adj = backward_scalar(&tape, root, &mut g).unwrap();
        assert_eq!(g, p);
        assert_eq!(adj[0].as_ref().unwrap(), &p);
    }

    #[test]
    fn backward_twice_doubles() {
        let p = array![[3.0, 1.0]];
        let mut tape = Tape::new();
        let root = quadratic(&mut tape, &p);
        let mut g = Array2::zeros((1, 2));
        backward_scalar(&tape, root, &mut g).unwrap();
        backward_scalar(&tape, root, &mut g).unwrap();
        assert_eq!(g, &p * 2.0);
    }

    #[test]
    fn shared_parent_accumulates() {
        // y = x + x, adjoint of x is 2
        let mut tape: Tape<f64, ()> = Tape::new();
        let x = tape.leaf(array![[1.5]]);
        let y = tape.op(array![[3.0]], &[x, x], Box::new(|g, _| Ok(vec![g.clone(), g.clone()])));
        let adj = backward_scalar(&tape, y, &mut ()).unwrap();
        assert_eq!(adj[0].as_ref().unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn empty_tape_errors() {
        let tape: Tape<f64, ()> = Tape::new();
        assert_eq!(backward_scalar(&tape, Var(0), &mut ()).unwrap_err(), SpanError::EmptyTape);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = ParamStore::new(pair()).unwrap();
        store.grads.a = array![[1e-6, -5.0], [300.0, 0.0]];
        store.grads.b = array![-0.01, 2.0];
        let before = store.values.clone();
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        store.adam_step(&cfg);
        let delta = &store.values.a - &before.a;
        assert!((delta[[0, 0]] + 0.01).abs() < 1e-4);
        assert!((delta[[0, 1]] - 0.01).abs() < 1e-6);
        assert!((delta[[1, 0]] + 0.01).abs() < 1e-6);
        assert_eq!(delta[[1, 1]], 0.0);
    }

    #[test]
    fn adam_zero_grad_and_frozen_unchanged() {
        let mut store = ParamStore::new(pair()).unwrap();
        store.adam_step(&AdamConfig::default());
        assert_eq!(store.values.a, pair().a);
        store.freeze(|n| n == "b");
        store.grads.b.fill(1.0);
        store.adam_step(&AdamConfig::default());
        assert_eq!(store.values.b, pair().b);
        assert!(store.is_frozen("b"));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = ParamStore::new(pair()).unwrap();
            for i in 0..3 {
                s.grads.a.fill(i as f64 - 1.3);
                s.grads.b.fill(0.7);
                s.adam_step(&AdamConfig::default());
            }
            flatten(&s.values)
        };
        assert_eq!(run(), run());
    }

    fn linear_loss(p: &Pair<f64>) -> f64 {
        let x = array![[0.3, -1.1]];
        let y = x.dot(&p.a) + &p.b;
        (&y * &array![[2.0, -0.5]]).sum()
    }

    fn linear_grad(_p: &Pair<f64>) -> Pair<f64> {
        let x = array![[0.3, -1.1]];
        let w = array![[2.0, -0.5]];
        Pair { a: x.t().dot(&w), b: w.row(0).to_owned() }
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let p = pair();
        let r = grad_check(&p, &linear_grad(&p), linear_loss, &GradCheckConfig::default());
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 6);
    }

    #[test]
    fn grad_check_flags_corruption() {
        let p = pair();
        let mut g = linear_grad(&p);
        g.a[[1, 0]] *= 1.5;
        let r = grad_check(&p, &g, linear_loss, &GradCheckConfig::default());
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst().unwrap().0, "a");
    }
}
