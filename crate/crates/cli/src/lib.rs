//! The `span` command-line harness. Every subcommand is a plain function so
//! tests can drive it without spawning a process.

pub mod config;
pub mod dataset;
pub mod report;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{load_json, load_or_default, RunConfig, Split};
use dataset::{read_dataset, write_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use report::{write_metrics, MetricsDoc};
use span_core::autodiff::Parameters;
use span_core::benchmark::{run_bench, BenchConfig};
use span_core::model::checkpoint::{read_checkpoint, write_checkpoint};
use span_core::model::{Ablation, HeadKind, ModelConfig, ModelParams};
use span_core::scalar::{Precision, Scalar};
use span_core::sparse::{align_rect, patchify_rect, Coord, Rect};
use span_core::synth::{SyntheticTaskSpec, TaskKind};
use span_core::train::{evaluate, train, EpochLog, Metrics};
use span_core::verify::{run_suite, CheckResult, Fault, VerifyConfig};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const BUILD_ID: &str = env!("SPAN_BUILD_ID");

#[derive(Debug, Parser)]
#[command(name = "span", version = BUILD_ID, about = "Sparse hierarchical attention over 2-D patch maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (.span maps plus manifest).
    GenData(GenDataArgs),
    /// Train a model and write checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Sparse versus dense convolution timing sweep (CSV).
    Bench(BenchArgs),
    /// Run the oracle equivalence and gradient suite.
    OracleCheck(OracleArgs),
    /// Align pixel rectangles to the patch grid and list patch coordinates.
    AlignGrid(AlignArgs),
    /// Export the relative position bias tables of a checkpoint (CSV).
    DumpRpb(DumpRpbArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON generator settings; flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<TaskKind>,
    #[arg(long)]
    pub num_maps: Option<usize>,
    #[arg(long)]
    pub occupancy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// May be repeated.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Vec<Ablation>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Directory for metrics files; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated occupancy fractions.
    #[arg(long, value_delimiter = ',')]
    pub occupancies: Option<Vec<f64>>,
    /// Comma-separated grid sides.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Instances per check; the default uses the full suite sizes.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Corrupt one path to confirm the suite notices.
    #[arg(long, value_parser = parse_fault)]
    pub inject_fault: Option<Fault>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// One rectangle per line: `x y w h` (commas or whitespace).
    pub input: PathBuf,
    #[arg(long, default_value_t = 224)]
    pub step: u32,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpRpbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<TaskKind, String> {
    match s {
        "classification" => Ok(TaskKind::Classification),
        "segmentation" => Ok(TaskKind::Segmentation),
        _ => Err(format!("unknown task kind {s:?}; expected classification or segmentation")),
    }
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: span_core::error::SpanError| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    s.parse().map_err(|e: span_core::error::SpanError| e.to_string())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::Bench(a) => cmd_bench(&a).map(|_| 0),
        Command::OracleCheck(a) => cmd_oracle_check(&a, &mut std::io::stdout()),
        Command::AlignGrid(a) => cmd_align_grid(&a).map(|_| 0),
        Command::DumpRpb(a) => cmd_dump_rpb(&a).map(|_| 0),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<SyntheticTaskSpec> {
    let mut spec: SyntheticTaskSpec = load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(k) = a.kind {
        spec.kind = k;
    }
    if let Some(n) = a.num_maps {
        spec.num_maps = n;
    }
    if a.occupancy.is_some() {
        spec.occupancy = a.occupancy;
    }
    let rows = write_dataset(&spec, &a.out)?;
    println!("maps={} out={}", rows.len(), a.out.display());
    Ok(spec)
}

/// Resolves file values and flag overrides into the final run config.
pub fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc: RunConfig = load_or_default(a.config.as_deref())?;
    if let Some(d) = &a.data {
        rc.data = d.clone();
    }
    if let Some(o) = &a.out {
        rc.out = o.clone();
    }
    if let Some(s) = a.seed {
        rc.seed = s;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(p) = a.precision {
        rc.precision = p;
    }
    for &ab in &a.ablation {
        rc.model.ablation.enable(ab);
    }
    rc.train.seed = rc.seed;
    Ok(rc)
}

/// Result of a training run as written to the metrics file.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config: RunConfig,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub eval: Metrics,
    pub elapsed_s: f64,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainReport> {
    let rc = resolve_run_config(a)?;
    match rc.precision {
        Precision::F32 => train_typed::<f32>(rc, a.quiet),
        Precision::F64 => train_typed::<f64>(rc, a.quiet),
    }
}

/// Head and input width follow the dataset.
fn fit_model_to_data(model: &mut ModelConfig, spec: &SyntheticTaskSpec) {
    model.in_dim = spec.feature_dim;
    model.head = match spec.kind {
        TaskKind::Classification => HeadKind::Mil,
        TaskKind::Segmentation => HeadKind::Unet,
    };
}

fn train_typed<T: Scalar>(mut rc: RunConfig, quiet: bool) -> Result<TrainReport> {
    let start = Instant::now();
    let ds = read_dataset::<T>(&rc.data)?;
    fit_model_to_data(&mut rc.model, &ds.spec);
    rc.model.validate()?;
    let init = ModelParams::<T>::init(&rc.model, &mut ChaCha8Rng::seed_from_u64(rc.seed))?;
    let outcome = train(&rc.model, &rc.train, init, &ds.train, &ds.val, |log| {
        if !quiet {
            eprintln!("{}", report::epoch_line(log));
        }
    })?;
    let eval = evaluate(&rc.model, &outcome.params, ds.split(rc.eval_split))?;
    std::fs::create_dir_all(&rc.out)?;
    write_checkpoint(&rc.out.join("checkpoint.spck"), &rc.model, &outcome.params)?;
    std::fs::write(rc.out.join("config.json"), serde_json::to_string_pretty(&rc)? + "\n")?;
    let rep = TrainReport {
        config: rc,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
        eval,
        elapsed_s: start.elapsed().as_secs_f64(),
    };
    let doc = MetricsDoc::from_train(&rep);
    write_metrics(&rep.config.out, &doc)?;
    print!("{}", doc.key_values());
    Ok(rep)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Metrics> {
    match a.precision.unwrap_or_default() {
        Precision::F32 => eval_typed::<f32>(a),
        Precision::F64 => eval_typed::<f64>(a),
    }
}

fn eval_typed<T: Scalar>(a: &EvalArgs) -> Result<Metrics> {
    let (model, params) = read_checkpoint::<T>(&a.checkpoint).map_err(|e| anyhow::anyhow!("{}: {e}", a.checkpoint.display()))?;
    let ds = read_dataset::<T>(&a.data)?;
    let m = evaluate(&model, &params, ds.split(a.split))?;
    let doc = MetricsDoc::from_eval(&model, a.split, &a.checkpoint, &m);
    if let Some(out) = &a.out {
        write_metrics(out, &doc)?;
    }
    print!("{}", doc.key_values());
    Ok(m)
}

pub fn bench_csv(rows: &[span_core::benchmark::BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<Vec<span_core::benchmark::BenchRow>> {
    let mut cfg: BenchConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => BenchConfig::default(),
    };
    if let Some(o) = &a.occupancies {
        cfg.occupancies = o.clone();
    }
    if let Some(s) = &a.sizes {
        cfg.sizes = s.clone();
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let rows = run_bench(&cfg)?;
    emit(a.out.as_deref(), &bench_csv(&rows)?)?;
    Ok(rows)
}

/// Prints one line per check; exit code 1 if any check failed.
pub fn cmd_oracle_check(a: &OracleArgs, w: &mut dyn Write) -> Result<i32> {
    let mut cfg = match a.trials {
        Some(t) => VerifyConfig::uniform(a.seed, t),
        None => VerifyConfig { seed: a.seed, ..Default::default() },
    };
    cfg.fault = a.inject_fault;
    if cfg.is_vacuous() {
        eprintln!("warning: trials=0, no instances checked");
    }
    if let Some(f) = cfg.fault {
        eprintln!("warning: fault injected into the {f} path");
    }
    let results: Vec<CheckResult> = run_suite(&cfg)?;
    for r in &results {
        writeln!(w, "{r}")?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    if failed.is_empty() {
        writeln!(w, "oracle-check: all {} checks passed", results.len())?;
        Ok(0)
    } else {
        writeln!(w, "oracle-check: FAILED {}", failed.join(", "))?;
        Ok(1)
    }
}

/// Parses `x y w h` lines; blank lines and `#` comments are skipped.
pub fn parse_rects(text: &str) -> Result<Vec<Rect>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<u32> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| anyhow::anyhow!("line {}: {e}: {line:?}", i + 1))?;
        let [x, y, w, h] = nums[..] else {
            bail!("line {}: expected 4 integers (x y w h), found {}: {line:?}", i + 1, nums.len());
        };
        out.push(Rect::new(x, y, w, h));
    }
    Ok(out)
}

/// Union of the patch coordinates of every aligned rectangle, in canonical order.
pub fn align_grid(rects: &[Rect], step: u32) -> Result<Vec<Coord>> {
    if step == 0 {
        bail!("step must be positive");
    }
    let mut all = BTreeSet::new();
    for &r in rects {
        all.extend(patchify_rect(align_rect(r, step), step)?);
    }
    Ok(all.into_iter().collect())
}

pub fn cmd_align_grid(a: &AlignArgs) -> Result<Vec<Coord>> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let rects = parse_rects(&text).with_context(|| a.input.display().to_string())?;
    let coords = align_grid(&rects, a.step)?;
    let body: String = coords.iter().map(|c| format!("{},{}\n", c.x, c.y)).collect();
    emit(a.out.as_deref(), &body)?;
    Ok(coords)
}

/// CSV rows `param,dx,dy,head,value` for every bias table.
pub fn rpb_csv<T: Scalar>(model: &ModelConfig, params: &ModelParams<T>) -> String {
    let w = model.effective_window() as i64;
    let side = 2 * w - 1;
    let mut out = String::from("param,dx,dy,head,value\n");
    params.visit("", &mut |name, a| {
        if !name.ends_with("rpb") || a.ndim() != 2 {
            return;
        }
        let heads = a.shape()[1];
        for row in 0..a.shape()[0] {
            let (dx, dy) = (row as i64 / side - (w - 1), row as i64 % side - (w - 1));
            for h in 0..heads {
                out.push_str(&format!("{name},{dx},{dy},{h},{}\n", a[[row, h]].as_f64()));
            }
        }
    });
    out
}

pub fn cmd_dump_rpb(a: &DumpRpbArgs) -> Result<()> {
    let (model, params) = read_checkpoint::<f32>(&a.checkpoint).map_err(|e| anyhow::anyhow!("{}: {e}", a.checkpoint.display()))?;
    emit(a.out.as_deref(), &rpb_csv(&model, &params))
}
