//! On-disk dataset layout:
//!
//! ```text
//! DIR/spec.json                 generator settings
//! DIR/manifest.csv              split,file,label,mask
//! DIR/maps/<split>_<i>.span
//! DIR/masks/<split>_<i>.mask    one class index per line, canonical order
//! ```

use crate::config::Split;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use span_core::format::{read_span, write_span};
use span_core::model::Target;
use span_core::scalar::Scalar;
use span_core::synth::{generate_splits, Sample, SyntheticTaskSpec, TaskKind};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub split: String,
    pub file: String,
    /// Bag label; empty for segmentation.
    pub label: String,
    /// Mask file; empty for classification.
    pub mask: String,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

impl<T> Dataset<T> {
    pub fn split(&self, s: Split) -> &[Sample<T>] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates and writes a dataset. Output bytes depend only on `spec`.
pub fn write_dataset(spec: &SyntheticTaskSpec, dir: &Path) -> Result<Vec<ManifestRow>> {
    let splits = generate_splits(spec)?;
    fs::create_dir_all(dir.join("maps"))?;
    if spec.kind == TaskKind::Segmentation {
        fs::create_dir_all(dir.join("masks"))?;
    }
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    let mut rows = Vec::new();
    for (split, samples) in [(Split::Train, &splits.train), (Split::Val, &splits.val), (Split::Test, &splits.test)] {
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{}_{i:05}", split.name());
            let file = format!("maps/{stem}.span");
            write_span(&s.map.cast::<f32>(), BufWriter::new(File::create(dir.join(&file))?))
                .with_context(|| format!("writing {file}"))?;
            let (label, mask) = match &s.target {
                Target::Class(c) => (c.to_string(), String::new()),
                Target::Mask(m) => {
                    let name = format!("masks/{stem}.mask");
                    let mut w = BufWriter::new(File::create(dir.join(&name))?);
                    for v in m {
                        writeln!(w, "{v}")?;
                    }
                    w.flush()?;
                    (String::new(), name)
                }
                Target::Survival { .. } => bail!("survival targets are not generated"),
            };
            rows.push(ManifestRow { split: split.name().into(), file, label, mask });
        }
    }
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

fn read_mask(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| l.trim().parse().with_context(|| format!("{}:{}: bad mask value {l:?}", path.display(), i + 1)))
        .collect()
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let spec: SyntheticTaskSpec = crate::config::load_json(&dir.join("spec.json"))?;
    let mut ds = Dataset { spec, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    let mut rdr = csv::Reader::from_path(dir.join("manifest.csv")).with_context(|| format!("opening manifest in {}", dir.display()))?;
    for (line, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = row.with_context(|| format!("manifest row {}", line + 2))?;
        let path = dir.join(&row.file);
        let map = read_span::<T, _>(File::open(&path).with_context(|| format!("opening {}", path.display()))?)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let target = if row.mask.is_empty() {
            Target::Class(row.label.parse().with_context(|| format!("manifest row {}: label", line + 2))?)
        } else {
            let mask = read_mask(&dir.join(&row.mask))?;
            if mask.len() != map.len() {
                bail!("{}: {} mask entries for {} tokens", row.mask, mask.len(), map.len());
            }
            Target::Mask(mask)
        };
        let sample = Sample { map, target };
        match row.split.as_str() {
            "train" => ds.train.push(sample),
            "val" => ds.val.push(sample),
            "test" => ds.test.push(sample),
            other => bail!("manifest row {}: unknown split {other:?}", line + 2),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> SyntheticTaskSpec {
        SyntheticTaskSpec { kind, num_maps: 12, seed: 2, ..Default::default() }
    }

    #[test]
    fn round_trip() {
        for kind in [TaskKind::Classification, TaskKind::Segmentation] {
            let dir = tempfile::tempdir().unwrap();
            let rows = write_dataset(&spec(kind), dir.path()).unwrap();
            assert_eq!(rows.len(), 12);
            let ds = read_dataset::<f32>(dir.path()).unwrap();
            let fresh = generate_splits(&spec(kind)).unwrap();
            assert_eq!(ds.train.len(), fresh.train.len());
            for (a, b) in ds.test.iter().zip(&fresh.test) {
                assert_eq!(a.target, b.target);
                assert_eq!(a.map, b.map.cast::<f32>());
            }
        }
    }
}
