//! Classification, segmentation and discrete-time survival losses.
//!
//! Probability-space functions take probabilities and clamp at
//! [`PROB_FLOOR`]; the `*_from_logits` variants fuse the softmax and return
//! the gradient with respect to the logits.

use super::config::LossSpec;
use crate::error::{Result, SpanError};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const PROB_FLOOR: f64 = 1e-12;

fn check_prob<T: Scalar>(p: T) -> Result<T> {
    let v = p.as_f64();
    if !(0.0..=1.0).contains(&v) {
        return Err(SpanError::DomainError(format!("probability {v} outside [0, 1]")));
    }
    Ok(T::lit(v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)))
}

pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// `-log p[label]` for one probability vector.
pub fn ce_loss<T: Scalar>(probs: ArrayView1<T>, label: usize) -> Result<T> {
    let p = *probs
        .get(label)
        .ok_or(SpanError::IndexError { label, bins: probs.len() })?;
    for &q in probs {
        check_prob(q)?;
    }
    Ok(-check_prob(p)?.ln())
}

/// Mean cross-entropy over rows.
pub fn ce_loss_rows<T: Scalar>(probs: ArrayView2<T>, labels: &[usize]) -> Result<T> {
    if probs.nrows() != labels.len() || labels.is_empty() {
        return Err(SpanError::DimensionMismatch(format!("{} rows, {} labels", probs.nrows(), labels.len())));
    }
    let mut acc = T::zero();
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        acc += ce_loss(row, y)?;
    }
    Ok(acc / T::lit(labels.len() as f64))
}

/// `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)` on foreground probabilities.
pub fn dice_loss<T: Scalar>(fg: ArrayView1<T>, mask: &[bool], eps: f64) -> Result<T> {
    if fg.len() != mask.len() {
        return Err(SpanError::DimensionMismatch(format!("{} probabilities, {} mask cells", fg.len(), mask.len())));
    }
    let (mut inter, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
    for (&p, &y) in fg.iter().zip(mask) {
        let p = check_prob(p)?;
        sp += p;
        if y {
            inter += p;
            sy += T::one();
        }
    }
    let e = T::lit(eps);
    Ok(T::one() - (T::lit(2.0) * inter + e) / (sp + sy + e))
}

/// `(1 - lambda) CE + lambda Dice` when the mask has foreground, else CE.
/// Class 1 is the foreground.
pub fn hybrid_loss<T: Scalar>(probs: ArrayView2<T>, labels: &[usize], spec: &LossSpec) -> Result<T> {
    let ce = ce_loss_rows(probs, labels)?;
    let mask: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
    if !mask.contains(&true) || probs.ncols() < 2 {
        return Ok(ce);
    }
    let dice = dice_loss(probs.column(1), &mask, spec.eps)?;
    let l = T::lit(spec.lambda);
    Ok((T::one() - l) * ce + l * dice)
}

/// Mean cross-entropy of softmax(logits) and its logit gradient.
pub fn ce_from_logits<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let probs = softmax_rows(logits);
    let loss = ce_loss_rows(probs.view(), labels)?;
    let n = T::lit(labels.len() as f64);
    let mut grad = probs;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        // clamped entries contribute a constant
        if row[y].as_f64() > PROB_FLOOR {
            row[y] -= T::one();
        } else {
            row.fill(T::zero());
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok((loss, grad))
}

/// Hybrid loss of softmax(logits) and its logit gradient.
pub fn hybrid_from_logits<T: Scalar>(logits: ArrayView2<T>, labels: &[usize], spec: &LossSpec) -> Result<(T, Array2<T>)> {
    let (ce, dce) = ce_from_logits(logits, labels)?;
    let has_fg = labels.contains(&1) && logits.ncols() >= 2;
    if !has_fg {
        return Ok((ce, dce));
    }
    let probs = softmax_rows(logits);
    let mask: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
    let dice = dice_loss(probs.column(1), &mask, spec.eps)?;
    let e = T::lit(spec.eps);
    let (mut inter, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
    for (&p, &y) in probs.column(1).iter().zip(&mask) {
        sp += p;
        if y {
            inter += p;
            sy += T::one();
        }
    }
    let a = T::lit(2.0) * inter + e;
    let b = sp + sy + e;
    let l = T::lit(spec.lambda);
    let mut grad = dce * (T::one() - l);
    for (i, (prow, mut grow)) in probs.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let y = if mask[i] { T::lit(2.0) } else { T::zero() };
        let dp1 = -(y * b - a) / (b * b) * l;
        let p1 = prow[1];
        for (j, g) in grow.iter_mut().enumerate() {
            let delta = if j == 1 { T::one() } else { T::zero() };
            *g += dp1 * p1 * (delta - prow[j]);
        }
    }
    let loss = (T::one() - l) * ce + l * dice;
    Ok((loss, grad))
}

fn log_sigmoid<T: Scalar>(a: T) -> T {
    // -softplus(-a)
    if a.as_f64() >= 0.0 {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

/// Discrete-time hazard negative log-likelihood.
///
/// `hazard = sigmoid(logits)`, `S_k = prod_{j<k} (1 - h_j)`; an event in
/// bin `y` contributes `log h_y + log S_y`, a censored sample `log S_{y+1}`.
/// Logs are floored at `ln(1e-12)`.
pub fn survival_nll<T: Scalar>(logits: ArrayView2<T>, labels: &[usize], censored: &[bool]) -> Result<T> {
    survival_nll_with_grad(logits, labels, censored).map(|(l, _)| l)
}

pub fn survival_nll_with_grad<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[usize],
    censored: &[bool],
) -> Result<(T, Array2<T>)> {
    let (n, k) = logits.dim();
    if labels.len() != n || censored.len() != n || n == 0 {
        return Err(SpanError::DimensionMismatch(format!("{n} rows, {} labels, {} flags", labels.len(), censored.len())));
    }
    let floor = PROB_FLOOR.ln();
    let mut total = 0.0;
    let mut grad = Array2::<T>::zeros((n, k));
    for i in 0..n {
        let y = labels[i];
        let c = censored[i];
        let upto = if c { y + 1 } else { y };
        if y >= k || upto > k {
            return Err(SpanError::IndexError { label: y, bins: k });
        }
        let row = logits.row(i);
        for j in 0..upto {
            // log(1 - h_j) = log_sigmoid(-a_j)
            let a = row[j].as_f64();
            let v = log_sigmoid(-a);
            if v > floor {
                total += v;
                grad[[i, j]] -= T::lit(-1.0 / (1.0 + (-a).exp()));
            } else {
                total += floor;
            }
        }
        if !c {
            let a = row[y].as_f64();
            let v = log_sigmoid(a);
            if v > floor {
                total += v;
                // d/da log h = 1 - h
                grad[[i, y]] -= T::lit(1.0 - 1.0 / (1.0 + (-a).exp()));
            } else {
                total += floor;
            }
        }
    }
    let scale = T::lit(1.0 / n as f64);
    grad.mapv_inplace(|g| g * scale);
    Ok((T::lit(-total / n as f64), grad))
}

/// Bin labels from quantiles of the uncensored times at `1/K, ..., (K-1)/K`
/// (linear interpolation). A time equal to an edge goes to the lower bin.
pub fn discretize_survival(times: &[f64], events: &[bool], bins: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if times.len() != events.len() {
        return Err(SpanError::DimensionMismatch(format!("{} times, {} events", times.len(), events.len())));
    }
    if bins == 0 {
        return Err(SpanError::InvalidConfig("bins must be >= 1".into()));
    }
    if let Some(t) = times.iter().find(|&&t| t.is_nan() || t <= 0.0) {
        return Err(SpanError::DomainError(format!("survival time {t} is not positive")));
    }
    let mut obs: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
    if obs.len() < bins {
        return Err(SpanError::DegenerateQuantiles { bins, uncensored: obs.len() });
    }
    obs.sort_by(f64::total_cmp);
    let last = (obs.len() - 1) as f64;
    let edges: Vec<f64> = (1..bins)
        .map(|q| {
            let pos = last * q as f64 / bins as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            obs[lo] + (obs[hi] - obs[lo]) * (pos - lo as f64)
        })
        .collect();
    let increasing = std::iter::once(obs[0]).chain(edges.iter().copied()).chain(std::iter::once(obs[obs.len() - 1]));
    let increasing: Vec<f64> = increasing.collect();
    if bins > 1 && increasing.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SpanError::DegenerateQuantiles { bins, uncensored: obs.len() });
    }
    let labels = times.iter().map(|&t| edges.iter().filter(|&&e| t > e).count()).collect();
    Ok((labels, edges))
}

/// Column means, used for pooling.
pub fn mean_rows<T: Scalar>(a: ArrayView2<T>) -> Array1<T> {
    a.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(a.ncols()))
}
