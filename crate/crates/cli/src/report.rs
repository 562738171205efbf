//! Metrics files: `metrics.txt` holds `key=value` lines followed by the JSON
//! document; `metrics.json` holds the JSON alone.

use crate::config::Split;
use crate::{TrainReport, BUILD_ID};
use anyhow::Result;
use serde::Serialize;
use serde_json::{json, Value};
use span_core::model::ModelConfig;
use span_core::train::{EpochLog, Metrics};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsDoc {
    pub build: String,
    pub command: String,
    pub ablations: Vec<String>,
    pub split: String,
    pub metrics: Metrics,
    /// Resolved configuration, and for training the epoch history.
    pub details: Value,
}

fn ablation_names(model: &ModelConfig) -> Vec<String> {
    model.ablation.active().iter().map(|a| a.name().to_string()).collect()
}

impl MetricsDoc {
    pub fn from_train(rep: &TrainReport) -> Self {
        Self {
            build: BUILD_ID.into(),
            command: "train".into(),
            ablations: ablation_names(&rep.config.model),
            split: rep.config.eval_split.name().into(),
            metrics: rep.eval.clone(),
            details: json!({
                "config": rep.config,
                "best_epoch": rep.best_epoch,
                "elapsed_s": rep.elapsed_s,
                "history": rep.history,
            }),
        }
    }

    pub fn from_eval(model: &ModelConfig, split: Split, checkpoint: &Path, m: &Metrics) -> Self {
        Self {
            build: BUILD_ID.into(),
            command: "eval".into(),
            ablations: ablation_names(model),
            split: split.name().into(),
            metrics: m.clone(),
            details: json!({ "model": model, "checkpoint": checkpoint }),
        }
    }

    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "build={}", self.build);
        let _ = writeln!(s, "command={}", self.command);
        let ab = if self.ablations.is_empty() { "none".to_string() } else { self.ablations.join(",") };
        let _ = writeln!(s, "ablations={ab}");
        let _ = writeln!(s, "split={}", self.split);
        let m = &self.metrics;
        let _ = writeln!(s, "n={}", m.n);
        let _ = writeln!(s, "loss={:.6}", m.loss);
        for (k, v) in [("accuracy", m.accuracy), ("macro_f1", m.macro_f1), ("dice", m.dice), ("iou", m.iou)] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k}={v:.6}");
            }
        }
        if let Some(e) = self.details.get("best_epoch") {
            let _ = writeln!(s, "best_epoch={e}");
        }
        if let Some(e) = self.details.get("elapsed_s").and_then(Value::as_f64) {
            let _ = writeln!(s, "elapsed_s={e:.1}");
        }
        s
    }
}

pub fn epoch_line(log: &EpochLog) -> String {
    let mut s = format!("epoch={}", log.epoch);
    if let Some(l) = log.train_loss {
        let _ = write!(s, " train_loss={l:.4}");
    }
    let _ = write!(s, " val_loss={:.4}", log.val.loss);
    if let Some(a) = log.val.accuracy {
        let _ = write!(s, " val_accuracy={a:.4}");
    }
    if let Some(d) = log.val.dice {
        let _ = write!(s, " val_dice={d:.4}");
    }
    s
}

pub fn write_metrics(dir: &Path, doc: &MetricsDoc) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(doc)?;
    std::fs::write(dir.join("metrics.json"), format!("{json}\n"))?;
    std::fs::write(dir.join("metrics.txt"), format!("{}\n{json}\n", doc.key_values()))?;
    Ok(())
}
