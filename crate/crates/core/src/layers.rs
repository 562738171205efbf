//! Row-wise dense layers shared by the attention blocks and the heads.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored `d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { weight: Array2::zeros((d_in, d_out)), bias: Array1::zeros(d_out) }
    }

    pub fn random<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((d_in, d_out), |_| T::lit(rng.random_range(-bound..bound))),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns `dx` and writes parameter gradients into `grads`.
    pub fn backward(&self, dy: ArrayView2<T>, x: ArrayView2<T>, grads: &mut Linear<T>) -> Array2<T> {
        grads.weight += &x.t().dot(&dy);
        grads.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

/// Per-row normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct NormSaved<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    pub fn zeros(d: usize) -> Self {
        Self { gamma: Array1::zeros(d), beta: Array1::zeros(d) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, NormSaved<T>) {
        let d = T::lit(x.ncols() as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *s = inv;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormSaved { xhat, inv_std })
    }

    pub fn backward(&self, dy: ArrayView2<T>, saved: &NormSaved<T>, grads: &mut LayerNorm<T>) -> Array2<T> {
        grads.gamma += &(&dy * &saved.xhat).sum_axis(Axis(0));
        grads.beta += &dy.sum_axis(Axis(0));
        let d = T::lit(dy.ncols() as f64);
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(saved.xhat.rows())
            .zip(saved.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = inv / d * (d * gi - sum_g - xi * sum_gx);
            });
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Expansion, GELU, contraction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub expand: Linear<T>,
    pub contract: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FfnSaved<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn random<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self { expand: Linear::random(d, hidden, rng), contract: Linear::random(hidden, d, rng) }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self { expand: Linear::zeros(d, hidden), contract: Linear::zeros(hidden, d) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, FfnSaved<T>) {
        let pre = self.expand.forward(x);
        let act = pre.mapv(gelu);
        let y = self.contract.forward(act.view());
        (y, FfnSaved { x: x.to_owned(), pre, act })
    }

    pub fn backward(&self, dy: ArrayView2<T>, saved: &FfnSaved<T>, grads: &mut FeedForward<T>) -> Array2<T> {
        let dact = self.contract.backward(dy, saved.act.view(), &mut grads.contract);
        let dpre = dact * &saved.pre.mapv(gelu_grad);
        self.expand.backward(dpre.view(), saved.x.view(), &mut grads.expand)
    }
}

crate::impl_parameters!(Linear { weight, bias });
crate::impl_parameters!(LayerNorm { gamma, beta });
crate::impl_parameters!(FeedForward { expand, contract });

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_607_5).abs() < 1e-9);
        assert!((gelu(-3.0f64) + 0.003_637_392_5).abs() < 1e-7);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-2.5f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::<f64>::new(4);
        let (y, _) = ln.forward(array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 5.0]].view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let mut ln = LayerNorm::<f64>::new(3);
        ln.gamma = array![0.5, -1.5, 2.0];
        ln.beta = array![0.1, 0.2, -0.3];
        let x = array![[0.3, -1.2, 2.2], [1.0, 0.9, -0.4]];
        let w = array![[1.0, -2.0, 0.5], [0.25, 3.0, -1.0]];
        let loss = |x: &Array2<f64>| (ln.forward(x.view()).0 * &w).sum();
        let (_, saved) = ln.forward(x.view());
        let mut g = LayerNorm::zeros(3);
        let dx = ln.backward(w.view(), &saved, &mut g);
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += 1e-6;
                let mut xm = x.clone();
                xm[[i, j]] -= 1e-6;
                let num = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((num - dx[[i, j]]).abs() < 1e-6, "{num} vs {}", dx[[i, j]]);
            }
        }
    }
}
