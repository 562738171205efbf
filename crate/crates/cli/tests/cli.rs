use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn span(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_span")).args(args).output().expect("spawn span")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--out", p(dir)];
    args.extend_from_slice(extra);
    let o = span(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

const TINY_RUN: &str = r#"{"model": {"dims": [4, 8], "heads": 1, "window": 2}, "train": {"epochs": 1, "batch_size": 2}}"#;

#[test]
fn gen_data_is_byte_identical_under_a_seed() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for kind in ["classification", "segmentation"] {
        gen(&a.join(kind), &["--seed", "0", "--num-maps", "24", "--kind", kind]);
        gen(&b.join(kind), &["--seed", "0", "--num-maps", "24", "--kind", kind]);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.len() > 48);
    assert_eq!(sa, sb);

    gen(&t.path().join("c"), &["--seed", "1", "--num-maps", "24"]);
    assert_ne!(snapshot(&a.join("classification")), snapshot(&t.path().join("c")));
}

#[test]
fn gen_data_manifest_and_balance() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), &["--seed", "5", "--num-maps", "200"]);
    let mut rdr = csv::Reader::from_path(t.path().join("manifest.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["split", "file", "label", "mask"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 200);
    let ones = rows.iter().filter(|r| &r[2] == "1").count();
    let frac = ones as f64 / rows.len() as f64;
    assert!((0.45..=0.55).contains(&frac), "label balance {frac}");
    for split in ["train", "val", "test"] {
        assert!(rows.iter().any(|r| &r[0] == split));
    }
    for r in &rows {
        assert!(t.path().join(&r[1]).is_file());
        assert!(r[3].is_empty());
    }
}

#[test]
fn gen_data_full_occupancy_is_dense() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), &["--num-maps", "6", "--occupancy", "1.0"]);
    let ds = span_cli::dataset::read_dataset::<f32>(t.path()).unwrap();
    let side = ds.spec.extent as usize;
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        assert_eq!(s.map.len(), side * side);
    }
}

#[test]
fn segmentation_masks_are_listed() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), &["--num-maps", "10", "--kind", "segmentation"]);
    let text = fs::read_to_string(t.path().join("manifest.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert!(cols[2].is_empty());
        assert!(t.path().join(cols[3]).is_file(), "{line}");
    }
}

#[test]
fn train_at_epoch_zero_scores_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, &["--num-maps", "100", "--seed", "2"]);
    let cfg = t.path().join("run.json");
    fs::write(&cfg, TINY_RUN).unwrap();
    let out = t.path().join("run");
    let o = span(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--epochs", "0", "--ablation", "no_shift", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let txt = fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(txt.contains("ablations=no_shift\n"), "{txt}");
    assert!(txt.contains("best_epoch=0\n"));
    assert!(txt.starts_with("build="));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(doc["details"]["config"]["model"]["ablation"]["no_shift"], true);
    assert_eq!(doc["details"]["config"]["train"]["epochs"], 0);
    assert_eq!(doc["command"], "train");
    let acc = doc["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.2..=0.8).contains(&acc), "untrained accuracy {acc}");
    assert!(out.join("checkpoint.spck").is_file());
    assert!(out.join("config.json").is_file());
}

#[test]
fn training_is_deterministic_and_eval_reproduces_it() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, &["--num-maps", "30", "--seed", "4"]);
    let cfg = t.path().join("run.json");
    fs::write(&cfg, TINY_RUN).unwrap();
    let metrics = |name: &str| {
        let out = t.path().join(name);
        let o = span(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--seed", "9", "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        (doc["metrics"].clone(), doc["details"]["history"].clone(), fs::read(out.join("checkpoint.spck")).unwrap())
    };
    let a = metrics("r1");
    assert_eq!(a, metrics("r2"));

    let ck = t.path().join("r1/checkpoint.spck");
    let o = span(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc = a.0["accuracy"].as_f64().unwrap();
    assert!(stdout(&o).contains(&format!("accuracy={acc:.6}")), "{}", stdout(&o));
}

#[test]
fn train_rejects_unknown_config_keys_and_ablations() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.json");
    fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let o = span(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
    let o = span(&["train", "--ablation", "no_thing"]);
    assert!(!o.status.success());
}

#[test]
fn oracle_check_passes_and_reports_each_check() {
    let o = span(&["oracle-check", "--trials", "4", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for name in ["conv_equivalence_f32", "conv_equivalence_f64", "attention_equivalence_f32", "conv_rulebook_set_equality", "grad_span_mil"] {
        assert!(text.lines().any(|l| l.starts_with("PASS") && l.contains(name)), "{name} missing:\n{text}");
    }
    assert!(text.contains("max_error="));
}

#[test]
fn injected_fault_fails_with_the_check_named() {
    for (fault, check) in [("conv", "conv_equivalence"), ("attention", "attention_equivalence"), ("rulebook", "rulebook_set_equality"), ("gradient", "grad_")] {
        let o = span(&["oracle-check", "--trials", "3", "--inject-fault", fault]);
        assert_eq!(o.status.code(), Some(1), "{fault}");
        let text = stdout(&o);
        assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains(check)), "{fault}:\n{text}");
        assert!(text.contains("FAILED"));
    }
}

#[test]
fn zero_trials_is_a_vacuous_pass_with_a_warning() {
    let o = span(&["oracle-check", "--trials", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
}

#[test]
fn align_grid_example_empty_and_malformed() {
    let t = tempfile::tempdir().unwrap();
    let rects = t.path().join("rects.txt");
    fs::write(&rects, "300 450 500 500\n").unwrap();
    let o = span(&["align-grid", p(&rects), "--step", "224"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "1,2\n2,2\n1,3\n2,3\n");

    fs::write(&rects, "").unwrap();
    let o = span(&["align-grid", p(&rects)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "");

    fs::write(&rects, "0 0 448 448\n10 20 thirty 40\n").unwrap();
    let o = span(&["align-grid", p(&rects)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn dump_rpb_lists_every_bias_entry() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, &["--num-maps", "10"]);
    let cfg = t.path().join("run.json");
    fs::write(&cfg, TINY_RUN).unwrap();
    let out = t.path().join("run");
    let o = span(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--epochs", "0", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv_path = t.path().join("rpb.csv");
    let o = span(&["dump-rpb", "--checkpoint", p(&out.join("checkpoint.spck")), "--out", p(&csv_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("param,dx,dy,head,value"));
    // 2 stages x (regular + shifted) x 3x3 offsets x 1 head
    assert_eq!(lines.count(), 2 * 2 * 9);
}

#[test]
fn bench_writes_median_rows() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("bench.csv");
    let o = span(&["bench", "--occupancies", "0.25,1.0", "--sizes", "16", "--repeats", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let h: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        h,
        ["occupancy", "size", "n", "rulebook_ms", "sparse_ms", "dense_ms", "sparse_peak_bytes", "dense_peak_bytes", "max_abs_diff"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[1][2], "256");
    let diff: f64 = rows[1][8].parse().unwrap();
    assert!(diff < 1e-4, "dense occupancy disagreement {diff}");
}
