//! Command-line surface: one subcommand per core operation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use astra_core::bench::{evaluate, latency_bench, render_report, ReportFormat};
use astra_core::classify::{classify_with, SegmentPolicy};
use astra_core::container::{load_model, save_model};
use astra_core::datasets::{load_jsonl, stats, synthetic_corpus, write_jsonl};
use astra_core::encoder::EncoderConfig;
use astra_core::forests::{BoostConfig, ForestConfig};
use astra_core::labels::PerLabel;
use astra_core::model::{build_model, Arch, ModelConfig};
use astra_core::training::{
    grid_search, train, two_stage_fit, FocalConfig, GridSpace, TrainConfig, TreeStage,
};
use astra_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::service::{spawn, ServeOptions};

#[derive(Parser, Debug)]
#[command(name = "astra", version, about = "Train, evaluate, and serve prompt-guard classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a neural architecture and save the frozen model
    Train(TrainArgs),
    /// Fine-tune an encoder, then fit per-label tree ensembles on its features
    TwoStageFit(TwoStageArgs),
    /// Probe every point of the default hyperparameter grid
    GridSearch(GridSearchArgs),
    /// Score a saved model against a labeled corpus
    Eval(EvalArgs),
    /// Measure per-sample classification latency alongside accuracy
    Bench(BenchArgs),
    /// Write a synthetic labeled corpus
    Generate(GenerateArgs),
    /// Print corpus label statistics
    Stats(StatsArgs),
    /// Serve a saved model over HTTP
    Serve(ServeArgs),
    /// Classify one text with a saved model
    Classify(ClassifyArgs),
}

/// Encoder dimensions shared by the commands that build a fresh model.
#[derive(Args, Clone, Debug)]
pub struct ShapeArgs {
    /// Embedding width.
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    /// Transformer blocks.
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    /// Attention heads per block.
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    /// Feed-forward width.
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    /// Token window, including the leading CLS slot.
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
}

impl ShapeArgs {
    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            ..EncoderConfig::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Architecture to build.
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    /// Labeled JSONL corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out fraction for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_ratio: f64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 3e-5)]
    pub lr: f64,
    /// Focal exponent; 0 reduces the loss to plain cross-entropy.
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    /// Loss weights as "jailbreak,prompt_injection".
    #[arg(long, default_value = "1.0,1.0", value_parser = parse_weights)]
    pub label_weights: (f64, f64),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decision threshold stored for both labels.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[command(flatten)]
    pub shape: ShapeArgs,
}

#[derive(Args, Debug)]
pub struct TwoStageArgs {
    /// Tree-headed architecture to fit.
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub val_ratio: f64,
    /// Encoder fine-tuning epochs (stage one).
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Stage-one peak learning rate.
    #[arg(long, default_value_t = 2e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Ensemble size: trees in the forest or boosting rounds.
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    /// Depth cap; defaults to 20 for the forest and 6 for boosting.
    #[arg(long)]
    pub tree_depth: Option<usize>,
    /// Boosting shrinkage.
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    #[command(flatten)]
    pub shape: ShapeArgs,
}

#[derive(Args, Debug)]
pub struct GridSearchArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub val_ratio: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Epochs each candidate trains before scoring.
    #[arg(long, default_value_t = 3)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON file for the winning point.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ShapeArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Saved model file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report format: markdown or csv.
    #[arg(long, default_value = "markdown", value_parser = parse_format)]
    pub format: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Untimed passes per sample before measurement.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Timed passes per sample.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value = "markdown", value_parser = parse_format)]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Destination JSONL file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Bind address; port 0 picks an ephemeral port.
    #[arg(long, default_value = "127.0.0.1:8460")]
    pub addr: String,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Reject request bodies above this many bytes.
    #[arg(long, default_value_t = 1 << 20)]
    pub max_body_bytes: usize,
    /// Override both stored decision thresholds.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Segment long inputs into windows of this many content tokens.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Token overlap between neighboring windows.
    #[arg(long, default_value_t = 32)]
    pub overlap: usize,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Override both stored decision thresholds.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Segment long inputs into windows of this many content tokens.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Token overlap between neighboring windows.
    #[arg(long, default_value_t = 32)]
    pub overlap: usize,
    /// Text to score.
    pub text: String,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    Arch::from_name(s).map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    ReportFormat::from_name(s).map_err(|e| e.to_string())
}

fn parse_weights(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated weights, got {s}"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("bad weight {v}: {e}"));
    Ok((num(a)?, num(b)?))
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::TwoStageFit(a) => run_two_stage(a),
        Cmd::GridSearch(a) => run_grid_search(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Bench(a) => run_bench(a),
        Cmd::Generate(a) => run_generate(a),
        Cmd::Stats(a) => run_stats(a),
        Cmd::Serve(a) => run_serve(a),
        Cmd::Classify(a) => run_classify(a),
    }
}

fn model_config(shape: &ShapeArgs, threshold: f64, seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: shape.encoder(),
        thresholds: PerLabel::new(threshold, threshold),
        seed,
        ..ModelConfig::default()
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("threshold must be in (0,1), got {t}")))
    }
}

fn segment_policy(max_tokens: Option<usize>, overlap: usize) -> Option<SegmentPolicy> {
    max_tokens.map(|m| SegmentPolicy::new(m, overlap))
}

fn model_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".to_string())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let ds = load_jsonl(&a.data)?;
    let model = build_model(a.arch, &model_config(&a.shape, a.threshold, a.seed))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        peak_lr: a.lr,
        val_ratio: a.val_ratio,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let loss = FocalConfig {
        gamma: a.gamma,
        task_weights: PerLabel::new(a.label_weights.0, a.label_weights.1),
    };
    let (best, history) = train(model, &ds, &cfg, &loss)?;
    for r in &history {
        println!("{}", r.to_line());
    }
    save_model(&best.freeze(), &a.out)?;
    println!("saved {} model to {}", a.arch, a.out.display());
    Ok(())
}

fn run_two_stage(a: TwoStageArgs) -> Result<()> {
    let ds = load_jsonl(&a.data)?;
    let stage1 = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        peak_lr: a.lr,
        val_ratio: a.val_ratio,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let tree_cfg = match TreeStage::for_arch(a.arch)? {
        TreeStage::Forest(f) => TreeStage::Forest(ForestConfig {
            n_estimators: a.trees,
            max_depth: a.tree_depth.unwrap_or(f.max_depth),
            seed: a.seed,
            ..f
        }),
        TreeStage::Boosted(b) => TreeStage::Boosted(BoostConfig {
            n_rounds: a.trees as i64,
            max_depth: a.tree_depth.unwrap_or(b.max_depth),
            shrinkage: a.eta,
            seed: a.seed,
            ..b
        }),
    };
    let model_cfg = model_config(&a.shape, a.threshold, a.seed);
    let (model, history) = two_stage_fit(a.arch, &ds, &stage1, &tree_cfg, &model_cfg)?;
    for r in &history {
        println!("{}", r.to_line());
    }
    save_model(&model.freeze(), &a.out)?;
    println!("saved {} model to {}", a.arch, a.out.display());
    Ok(())
}

fn run_grid_search(a: GridSearchArgs) -> Result<()> {
    let ds = load_jsonl(&a.data)?;
    let space = GridSpace { probe_epochs: a.probe_epochs, ..GridSpace::default() };
    let base = TrainConfig {
        batch_size: a.batch_size,
        val_ratio: a.val_ratio,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let outcome = grid_search(a.arch, &space, &ds, &base, &model_config(&a.shape, 0.5, a.seed))?;
    for r in &outcome.results {
        println!("{}", r.to_line());
    }
    println!(
        "best: lr={} gamma={} weights={},{} val_macro_f1={}",
        outcome.best.lr, outcome.best.gamma, outcome.best.weights.0, outcome.best.weights.1, outcome.best_f1
    );
    if let Some(path) = &a.out {
        let blob = serde_json::json!({
            "lr": outcome.best.lr,
            "gamma": outcome.best.gamma,
            "weights": [outcome.best.weights.0, outcome.best.weights.1],
            "val_macro_f1": outcome.best_f1,
        });
        fs::write(path, blob.to_string())?;
        println!("wrote best point to {}", path.display());
    }
    Ok(())
}

fn emit_report(text: String, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, &text)?;
            println!("wrote report to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = load_jsonl(&a.data)?;
    let report = evaluate(&model, &ds, model.arch.name())?;
    emit_report(render_report(&[report], a.format), a.out.as_deref())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = load_jsonl(&a.data)?;
    let mut report = evaluate(&model, &ds, model.arch.name())?;
    let lat = latency_bench(&model, &ds, a.warmup, a.reps)?;
    println!("latency mean={}ms p50={}ms p95={}ms", lat.mean_ms, lat.p50_ms, lat.p95_ms);
    report.latency = Some(lat);
    emit_report(render_report(&[report], a.format), a.out.as_deref())
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let ds = synthetic_corpus(a.count, a.seed);
    write_jsonl(&ds, &a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn run_stats(a: StatsArgs) -> Result<()> {
    let ds = load_jsonl(&a.data)?;
    let s = stats(&ds);
    println!("dataset: {}", ds.name);
    println!("total: {}", s.total);
    println!("harmful: {} ({:.2}%)", s.harmful_count, s.harmful_pct);
    println!("safe: {} ({:.2}%)", s.safe_count, s.safe_pct);
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let mut model = load_model(&a.model)?;
    if let Some(t) = a.threshold {
        check_threshold(t)?;
        model.thresholds = PerLabel::new(t, t);
    }
    let name = model_label(&a.model);
    let opts = ServeOptions {
        addr: a.addr,
        workers: a.workers,
        max_body_bytes: a.max_body_bytes,
        policy: segment_policy(a.max_tokens, a.overlap),
    };
    let service = spawn(model, name, &opts)?;
    println!("serving on http://{} ({} workers)", service.addr(), opts.workers.max(1));
    service.wait();
    Ok(())
}

fn run_classify(a: ClassifyArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let thresholds = match a.threshold {
        Some(t) => {
            check_threshold(t)?;
            Some(PerLabel::new(t, t))
        }
        None => None,
    };
    let policy = segment_policy(a.max_tokens, a.overlap);
    let resp = classify_with(&model, &a.text, policy.as_ref(), thresholds.as_ref())?;
    let line = serde_json::to_string(&resp).map_err(|e| Error::state(e.to_string()))?;
    println!("{line}");
    Ok(())
}
