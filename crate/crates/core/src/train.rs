//! Single-threaded trainer with Adam, validation-based model selection and
//! the classification and segmentation metrics.

use crate::autodiff::{accumulate, AdamConfig, ParamStore, Parameters};
use crate::error::{Result, SpanError};
use crate::model::{loss_and_grad, predict, HeadKind, ModelConfig, ModelParams, Prediction, Target};
use crate::scalar::Scalar;
use crate::synth::Sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Maps per Adam step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, lr: 1e-3, schedule: LrSchedule::Cosine, batch_size: 4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SpanError::InvalidConfig("batch_size must be >= 1 and lr positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Evaluation summary. Segmentation scores pool true and false positives
/// over every patch of the split before taking the ratio.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

impl Metrics {
    /// Score used for model selection: accuracy, else Dice.
    pub fn selection_score(&self) -> f64 {
        self.accuracy.or(self.dice).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Macro-averaged F1 over `classes`; a class absent from both predictions
/// and labels is skipped.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut scores = Vec::new();
    for c in 0..classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
        if tp + fp + fn_ > 0.0 {
            scores.push(2.0 * tp / (2.0 * tp + fp + fn_));
        }
    }
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Dice and IoU of the foreground class from pooled counts; both are 1 when
/// neither side has any foreground.
pub fn dice_iou(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    if tp + fp + fn_ == 0 {
        return (1.0, 1.0);
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
}

fn argmax<T: Scalar>(row: impl IntoIterator<Item = T>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v.as_f64() > best.1 {
            best = (i, v.as_f64());
        }
    }
    best.0
}

pub fn evaluate<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>, samples: &[Sample<T>]) -> Result<Metrics> {
    let mut loss = 0.0;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in samples {
        let prediction = predict(cfg, params, &s.map)?;
        match (&prediction, &s.target) {
            (Prediction::Class(p), Target::Class(y)) => {
                loss -= p[*y].as_f64().max(1e-12).ln();
                pred.push(argmax(p.iter().copied()));
                truth.push(*y);
            }
            (Prediction::Segmentation(out), Target::Mask(mask)) => {
                let logits = out.features();
                let probs = crate::model::loss::softmax_rows(logits.view());
                loss += crate::model::loss::hybrid_loss(probs.view(), mask, &cfg.loss)?.as_f64();
                for (row, &m) in logits.rows().into_iter().zip(mask) {
                    match (argmax(row.iter().copied()) == 1, m == 1) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
            _ => return Err(SpanError::InvalidConfig("target does not match the model head".into())),
        }
    }
    let n = samples.len();
    let mut m = Metrics { n, loss: if n > 0 { loss / n as f64 } else { 0.0 }, ..Default::default() };
    match cfg.head {
        HeadKind::Mil => {
            let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
            m.accuracy = Some(if n > 0 { correct as f64 / n as f64 } else { 0.0 });
            m.macro_f1 = Some(macro_f1(&pred, &truth, cfg.num_classes));
        }
        HeadKind::Unet => {
            let (d, i) = dice_iou(tp, fp, fn_);
            m.dice = Some(d);
            m.iou = Some(i);
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Absent for the initialization row.
    pub train_loss: Option<f64>,
    pub val: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch.
    pub params: ModelParams<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Zeroes and freezes the bias tables when the ablation asks for it.
pub fn apply_ablation_freezes<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T, ModelParams<T>>) {
    if cfg.ablation.no_rpb {
        let is_rpb = |name: &str| name.ends_with("rpb");
        store.values.visit_mut("", &mut |name, mut a| {
            if is_rpb(name) {
                a.fill(T::zero());
            }
        });
        store.freeze(is_rpb);
    }
}

/// Trains from `init`. Epoch 0 is the initialization; the returned
/// parameters come from the epoch with the best validation score, earliest
/// on ties. `on_epoch` sees every log line as it is produced.
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    init: ModelParams<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    tc.validate()?;
    let mut store = ParamStore::new(init)?;
    apply_ablation_freezes(cfg, &mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = train_set.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;

    let log0 = EpochLog { epoch: 0, train_loss: None, val: evaluate(cfg, &store.values, val_set)? };
    on_epoch(&log0);
    let mut best = (log0.val.selection_score(), 0, store.values.clone());
    let mut history = vec![log0];

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            store.zero_grad();
            for &i in batch {
                let s = &train_set[i];
                let step = loss_and_grad(cfg, &store.values, &s.map, &s.target)?;
                total += step.loss.as_f64();
                accumulate(&mut store.grads, &step.grads);
            }
            if batch.len() > 1 {
                let k = T::lit(1.0 / batch.len() as f64);
                store.grads.visit_mut("", &mut |_, mut a| a.mapv_inplace(|v| v * k));
            }
            let lr = tc.lr_at(store.step_count() as usize, total_steps);
            store.adam_step(&AdamConfig { lr, ..Default::default() });
        }
        let log = EpochLog {
            epoch,
            train_loss: Some(total / train_set.len().max(1) as f64),
            val: evaluate(cfg, &store.values, val_set)?,
        };
        on_epoch(&log);
        if log.val.selection_score() > best.0 {
            best = (log.val.selection_score(), epoch, store.values.clone());
        }
        history.push(log);
    }
    Ok(TrainOutcome { params: best.2, best_epoch: best.1, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{build_sparse_map, Coord};
    use ndarray::Array2;

    #[test]
    fn f1_and_dice_by_hand() {
        assert!((macro_f1(&[1, 1, 0, 0], &[1, 0, 0, 0], 2) - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(dice_iou(0, 0, 0), (1.0, 1.0));
        let (d, i) = dice_iou(3, 1, 2);
        assert!((d - 6.0 / 9.0).abs() < 1e-12 && (i - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_decays() {
        let tc = TrainConfig { schedule: LrSchedule::Cosine, ..Default::default() };
        assert_eq!(tc.lr_at(0, 10), tc.lr);
        assert!(tc.lr_at(10, 10).abs() < 1e-15);
    }

    fn toy(n: usize) -> Vec<Sample<f64>> {
        // the label is the sign of the first feature of every token
        (0..n)
            .map(|i| {
                let y = i % 2;
                let coords: Vec<Coord> = (0..6).map(|k| Coord::new(k % 3, k / 3)).collect();
                let s = if y == 1 { 1.0 } else { -1.0 };
                let feats = Array2::from_shape_fn((6, 2), |(r, c)| if c == 0 { s } else { 0.1 * r as f64 });
                Sample { map: build_sparse_map(coords, feats, 0).unwrap(), target: Target::Class(y) }
            })
            .collect()
    }

    fn small() -> ModelConfig {
        ModelConfig { in_dim: 2, dims: vec![4, 4], heads: 1, window: 2, ..Default::default() }
    }

    #[test]
    fn learns_a_trivial_task_and_selects_best() {
        let cfg = small();
        let data = toy(8);
        let init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tc = TrainConfig { epochs: 15, lr: 1e-2, ..Default::default() };
        let out = train(&cfg, &tc, init, &data, &data, |_| {}).unwrap();
        assert_eq!(out.history.len(), 16);
        let best = &out.history[out.best_epoch];
        assert_eq!(best.val.accuracy, Some(1.0));
        assert_eq!(evaluate(&cfg, &out.params, &data).unwrap(), best.val);
        let first = out.history[1].train_loss.unwrap();
        assert!(out.history.last().unwrap().train_loss.unwrap() < first);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small();
        let data = toy(6);
        let run = || {
            let init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            train(&cfg, &TrainConfig { epochs: 2, batch_size: 2, ..Default::default() }, init, &data, &data, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn no_rpb_keeps_tables_zero() {
        let mut cfg = small();
        cfg.ablation.no_rpb = true;
        let data = toy(4);
        let mut init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        init.visit_mut("", &mut |name, mut a| {
            if name.ends_with("rpb") {
                a.fill(0.3);
            }
        });
        let out = train(&cfg, &TrainConfig { epochs: 2, ..Default::default() }, init, &data, &data, |_| {}).unwrap();
        let mut seen = 0;
        out.params.visit("", &mut |name, a| {
            if name.ends_with("rpb") {
                seen += 1;
                assert!(a.iter().all(|&v| v == 0.0), "{name}");
            }
        });
        assert!(seen > 0);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = small();
        let data = toy(4);
        let init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let out = train(&cfg, &TrainConfig { epochs: 0, ..Default::default() }, init.clone(), &data, &data, |_| {}).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.best_epoch, 0);
    }
}
