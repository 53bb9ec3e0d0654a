//! `tsnet`: one binary for the whole pipeline. Subcommands generate the
//! synthetic dataset, train the recognizer, evaluate, decode single
//! lines, fit style embeddings for unseen documents, and run the style
//! diagnostics. Every run directory receives the resolved configuration
//! and a manifest of produced files; all randomness flows from one seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tsnet::adapt::{
    adapt_embedding, adaptation_sweep, load_embedding, save_embedding, AdaptConfig, SweepConfig,
};
use tsnet::analysis::{
    distance_correlation, gamma_beta_pca, mds_projection, pairs_csv, points_csv, scatter_svg,
    substitution_csv, substitution_stats,
};
use tsnet::ctc::greedy_decode;
use tsnet::net::{forward_line, HeadMode, LineStyle, Model, NetworkConfig};
use tsnet::synth::{
    build_dataset, load_dataset, read_pgm, Alphabet, Sample, Split, SynthConfig,
};
use tsnet::tensor::Tape;
use tsnet::train::{
    evaluate, evaluate_refs, train, AdamState, Checkpoint, EvalReport, TrainConfig,
    TsiMode, METRICS_HEADER,
};
use tsnet::{Error, Result};

/// Full run configuration: one JSON document covering dataset synthesis,
/// the network, and training, with a root seed that drives every random
/// stream. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    network: NetworkConfig,
    train: TrainConfig,
    dataset: SynthConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        // The root seed is the single source of randomness.
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

/// A run's output directory. Collects the names of produced files and
/// closes with the resolved configuration plus a manifest.
struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.note(name);
        Ok(path)
    }

    /// Records a file some callee already wrote into the run directory.
    fn note(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    fn finish(mut self, resolved: &impl Serialize) -> Result<()> {
        let cfg = serde_json::to_string_pretty(resolved)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.write("run_config.json", &cfg)?;
        let manifest = serde_json::json!({ "files": self.files });
        let path = self.path("run_manifest.json");
        std::fs::write(&path, format!("{manifest:#}\n")).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

#[derive(Parser)]
#[command(name = "tsnet", version, about = "Style-conditioned CTC text line recognizer")]
struct Cli {
    /// Worker threads (1 = bit-exact serial mode). Falls back to
    /// TSNET_THREADS, then to the core count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic permutation-style dataset.
    Gen(GenArgs),
    /// Train the recognizer; writes a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Transcribe one PGM line image.
    Decode(DecodeArgs),
    /// Fit a style embedding for one TSI from exemplar lines.
    Adapt(AdaptArgs),
    /// Embedding-space and output-confusion diagnostics.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration (dataset section applies).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    styles: Option<usize>,
    #[arg(long)]
    tsi_per_style: Option<usize>,
    #[arg(long)]
    lines_per_tsi: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Run output directory (checkpoint, metrics, logs).
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration (network + train sections apply).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the style-agnostic FRN head instead of the style block.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from an earlier checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset split: train, test, or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Score with randomly permuted TSI assignments.
    #[arg(long)]
    shuffle_tsi: bool,
    /// Score every line with this fixed embedding file.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional run directory for the per-line CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Line image (binary 8-bit PGM).
    #[arg(long)]
    image: PathBuf,
    /// Decode under this registered TSI.
    #[arg(long)]
    tsi: Option<u32>,
    /// Decode with an adapted embedding file instead of a TSI.
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Character set the model was trained on.
    #[arg(long, default_value_t = SynthConfig::default().alphabet)]
    alphabet: String,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// TSI whose lines provide exemplars and the held-out score.
    #[arg(long)]
    tsi: u32,
    #[arg(long)]
    out: PathBuf,
    /// Dataset split to draw lines from.
    #[arg(long, default_value = "all")]
    split: String,
    /// Exemplar lines to fit on (default: the whole pool).
    #[arg(long)]
    count: Option<usize>,
    /// Lines reserved from the end of the pool for scoring.
    #[arg(long, default_value_t = 50)]
    holdout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// L-BFGS iteration cap.
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Disable exemplar masking noise.
    #[arg(long)]
    no_augment: bool,
    /// Run the full exemplar-count sweep instead of a single fit.
    #[arg(long)]
    sweep: bool,
    /// Comma-separated exemplar counts for --sweep.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    /// Random subsets per count for --sweep.
    #[arg(long, default_value_t = 10)]
    repeats: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset split providing the decode lines.
    #[arg(long, default_value = "test")]
    split: String,
    /// Cap on decoded lines.
    #[arg(long, default_value_t = 200)]
    lines: usize,
    /// Embedding-space PCA (CSV + SVG). No selection flag = everything.
    #[arg(long)]
    pca: bool,
    /// Output-distance MDS map (CSV + SVG).
    #[arg(long)]
    mds: bool,
    /// Cross-style substitution table (CSV).
    #[arg(long)]
    substitutions: bool,
    /// Embedding-distance vs output-distance correlation (CSV).
    #[arg(long)]
    correlation: bool,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "all" => Ok(Split::All),
        other => Err(Error::Config(format!(
            "unknown split {other:?} (expected train, test, or all)"
        ))),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn run_gen(args: GenArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(n) = args.styles {
        cfg.dataset.n_styles = n;
    }
    if let Some(m) = args.tsi_per_style {
        cfg.dataset.tsi_per_style = m;
    }
    if let Some(l) = args.lines_per_tsi {
        cfg.dataset.lines_per_tsi = l;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }

    if args.out.exists() {
        let occupied = std::fs::read_dir(&args.out)
            .map_err(|e| Error::io(&args.out, e))?
            .next()
            .is_some();
        if occupied && !args.force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to write anyway",
                args.out.display()
            )));
        }
    }
    let mut run = RunDir::create(&args.out)?;
    build_dataset(&cfg.dataset, cfg.seed, &args.out)?;
    for name in ["meta.json", "manifest.tsv", "train.tsv", "test.tsv", "lines"] {
        if run.path(name).exists() {
            run.note(name);
        }
    }
    run.finish(&cfg)?;
    println!(
        "{}",
        serde_json::json!({
            "out": args.out,
            "tsi": cfg.dataset.n_tsi(),
            "lines": cfg.dataset.n_tsi() * cfg.dataset.lines_per_tsi,
        })
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if args.baseline {
        cfg.network.head_mode = HeadMode::FrnBaseline;
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }

    let data = load_dataset(&args.data, Split::Train)?;
    let test = load_dataset(&args.data, Split::Test)?;

    let (mut model, mut adam, start_iter) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            cfg.network = ckpt.model.config.clone();
            (ckpt.model, ckpt.adam.unwrap_or_default(), ckpt.iteration)
        }
        None => (
            Model::<f32>::new(cfg.network.clone(), cfg.seed)?,
            AdamState::new(),
            0,
        ),
    };

    let mut run = RunDir::create(&args.out)?;
    let metrics_path = run.path("metrics.csv");
    if start_iter == 0 || !metrics_path.exists() {
        std::fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))
            .map_err(|e| Error::io(&metrics_path, e))?;
    }
    run.note("metrics.csv");

    let report = train(
        &mut model,
        &mut adam,
        start_iter,
        &cfg.train,
        &data,
        &test.samples,
        |row| {
            let line = format!("{}\n", row.csv_line());
            use std::io::Write;
            if let Ok(mut f) = std::fs::OpenOptions::new().append(true).open(&metrics_path) {
                let _ = f.write_all(line.as_bytes());
            }
            eprintln!("iter {} loss {:.4}", row.iter, row.loss);
        },
    )?;

    let ckpt = Checkpoint {
        model,
        train_config: Some(cfg.train.clone()),
        iteration: cfg.train.iterations,
        adam: Some(adam),
    };
    ckpt.save(&run.path("checkpoint.ckpt"))?;
    run.note("checkpoint.ckpt");
    run.finish(&cfg)?;

    let last = report.metrics.last();
    println!(
        "{}",
        serde_json::json!({
            "iterations": cfg.train.iterations,
            "final_loss": last.map(|r| r.loss),
            "test_cer": last.and_then(|r| r.test_cer),
            "skipped_infeasible": report.skipped_infeasible,
            "skipped_nonfinite": report.skipped_nonfinite,
            "aborted_steps": report.aborted_steps,
        })
    );
    Ok(())
}

fn eval_csv(report: &EvalReport) -> String {
    let mut s = String::from("tsi,eval_tsi,reference,hypothesis,edits\n");
    for row in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            row.tsi,
            row.eval_tsi.map(|t| t.to_string()).unwrap_or_default(),
            row.reference,
            row.hypothesis,
            row.edits
        ));
    }
    s
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data, parse_split(&args.split)?)?;
    if args.shuffle_tsi && args.embedding.is_some() {
        return Err(Error::Config(
            "--shuffle-tsi and --embedding are mutually exclusive".into(),
        ));
    }
    let fixed = args.embedding.as_deref().map(load_embedding).transpose()?;
    let mode = match (&fixed, args.shuffle_tsi) {
        (Some(e), _) => TsiMode::Fixed(e),
        (None, true) => TsiMode::Shuffled(args.seed),
        (None, false) => TsiMode::Given,
    };
    let report = evaluate(&ckpt.model, &data.samples, &data.alphabet, mode)?;

    if let Some(out) = &args.out {
        let mut run = RunDir::create(out)?;
        run.write("eval.csv", &eval_csv(&report))?;
        run.finish(&serde_json::json!({
            "checkpoint": args.checkpoint,
            "data": args.data,
            "split": args.split,
            "shuffle_tsi": args.shuffle_tsi,
            "embedding": args.embedding,
            "seed": args.seed,
        }))?;
    }
    println!(
        "{}",
        serde_json::json!({
            "cer": report.cer,
            "total_edits": report.total_edits,
            "total_ref_len": report.total_ref_len,
            "lines": report.rows.len(),
        })
    );
    Ok(())
}

fn run_decode(args: DecodeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let alphabet = Alphabet::new(&args.alphabet)?;
    if alphabet.num_classes() != ckpt.model.config.num_classes {
        return Err(Error::Config(format!(
            "alphabet {:?} implies {} classes but the model has {}",
            args.alphabet,
            alphabet.num_classes(),
            ckpt.model.config.num_classes
        )));
    }
    let image = read_pgm(&args.image)?;

    let mut tape = Tape::inference();
    let vars = ckpt.model.vars(&mut tape, false);
    let style = match (&args.tsi, &args.embedding) {
        (Some(t), None) => LineStyle::Row(ckpt.model.style_table()?.require_row(*t)?),
        (None, Some(path)) => {
            let e = load_embedding(path)?;
            LineStyle::Embedding(tape.leaf(&e, false))
        }
        (None, None) if ckpt.model.config.head_mode != HeadMode::Tsb => LineStyle::Baseline,
        _ => {
            return Err(Error::Config(
                "pass exactly one of --tsi or --embedding (neither for a baseline model)".into(),
            ))
        }
    };
    let logits = forward_line(&mut tape, &ckpt.model.config, &vars, &image, style)?;
    let classes = greedy_decode(tape.value(logits))?;
    println!("{}", alphabet.text_of_classes(&classes)?);
    Ok(())
}

fn lbfgs_trace_csv(trace: &[tsnet::adapt::LbfgsTraceRow]) -> String {
    let mut s = String::from("iter,f,grad_norm,step,backtracks\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter, r.f, r.grad_norm, r.step, r.backtracks
        ));
    }
    s
}

fn run_adapt(args: AdaptArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data, parse_split(&args.split)?)?;
    let lines: Vec<&Sample> = data.samples.iter().filter(|s| s.tsi == args.tsi).collect();
    if lines.is_empty() {
        return Err(Error::Config(format!(
            "dataset has no lines with TSI {}",
            args.tsi
        )));
    }
    if args.holdout >= lines.len() {
        return Err(Error::Config(format!(
            "holdout {} swallows all {} lines of TSI {}",
            args.holdout,
            lines.len(),
            args.tsi
        )));
    }
    let (pool, heldout) = lines.split_at(lines.len() - args.holdout);

    let mut adapt_cfg = AdaptConfig {
        seed: args.seed,
        augment: !args.no_augment,
        ..AdaptConfig::default()
    };
    adapt_cfg.lbfgs.max_iter = args.iterations;

    let mut run = RunDir::create(&args.out)?;
    let resolved = serde_json::json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "tsi": args.tsi,
        "split": args.split,
        "count": args.count,
        "holdout": args.holdout,
        "seed": args.seed,
        "iterations": args.iterations,
        "augment": !args.no_augment,
        "sweep": args.sweep,
        "counts": args.counts,
        "repeats": args.repeats,
    });

    if args.sweep {
        let sweep_cfg = SweepConfig {
            counts: args.counts.unwrap_or_else(|| vec![1, 4, 12, 20, 50, 100]),
            repeats: args.repeats,
            seed: args.seed,
            adapt: adapt_cfg,
        };
        let pool_owned: Vec<Sample> = pool.iter().map(|s| (*s).clone()).collect();
        let held_owned: Vec<Sample> = heldout.iter().map(|s| (*s).clone()).collect();
        let report = adaptation_sweep(
            &ckpt.model,
            &pool_owned,
            &held_owned,
            &data.alphabet,
            data.meta.char_width,
            &sweep_cfg,
        )?;
        run.write("sweep.csv", &tsnet::adapt::sweep_csv(&report.cells))?;
        run.write(
            "sweep_summary.csv",
            &tsnet::adapt::sweep_summary_csv(&report.summary),
        )?;
        run.finish(&resolved)?;
        println!(
            "{}",
            serde_json::json!({
                "cells": report.cells.len(),
                "summary": report.summary.iter().map(|s| {
                    serde_json::json!({"count": s.count, "mean_cer": s.mean, "min_cer": s.min})
                }).collect::<Vec<_>>(),
            })
        );
        return Ok(());
    }

    let count = args.count.unwrap_or(pool.len()).min(pool.len());
    let exemplars: Vec<(tsnet::tensor::Tensor<f32>, String)> = pool[..count]
        .iter()
        .map(|s| (s.image.clone(), s.text.clone()))
        .collect();
    let adapted = adapt_embedding(
        &ckpt.model,
        &exemplars,
        &data.alphabet,
        data.meta.char_width,
        &adapt_cfg,
    )?;
    save_embedding(&run.path("embedding.tsem"), &adapted.embedding)?;
    run.note("embedding.tsem");
    run.write("trace.csv", &lbfgs_trace_csv(&adapted.trace))?;

    let holdout_cer = if heldout.is_empty() {
        None
    } else {
        Some(
            evaluate_refs(
                &ckpt.model,
                heldout,
                &data.alphabet,
                TsiMode::Fixed(&adapted.embedding),
            )?
            .cer,
        )
    };
    run.finish(&resolved)?;
    println!(
        "{}",
        serde_json::json!({
            "exemplars": count,
            "rejected": adapted.rejected,
            "converged": adapted.converged,
            "iterations": adapted.trace.len(),
            "final_loss": adapted.trace.last().map(|r| r.f),
            "holdout_cer": holdout_cer,
        })
    );
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data, parse_split(&args.split)?)?;
    let all = !(args.pca || args.mds || args.substitutions || args.correlation);
    let lines: Vec<Sample> = data.samples.iter().take(args.lines).cloned().collect();
    if lines.is_empty() {
        return Err(Error::Config("no lines to analyze".into()));
    }

    let mut run = RunDir::create(&args.out)?;
    let mut summary = serde_json::Map::new();

    if all || args.pca {
        let table = ckpt.model.style_table()?;
        let res = gamma_beta_pca(table)?;
        run.write("pca.csv", &points_csv(&res.tsi, &res.points))?;
        let classes: Vec<usize> = res
            .tsi
            .iter()
            .map(|&t| data.style_of_tsi(t))
            .collect();
        run.write(
            "pca.svg",
            &scatter_svg(&res.tsi, &res.points, &classes, "style embedding PCA"),
        )?;
        summary.insert(
            "pca_explained".into(),
            serde_json::json!([res.explained[0], res.explained[1]]),
        );
        summary.insert("pca_degenerate".into(), res.degenerate.into());
    }

    if all || args.mds || args.correlation {
        let corr = distance_correlation(&ckpt.model, &data.alphabet, &lines)?;
        if all || args.correlation {
            run.write("pairs.csv", &pairs_csv(&corr.pairs))?;
            summary.insert(
                "pearson_r".into(),
                corr.r.map(serde_json::Value::from).unwrap_or(serde_json::Value::Null),
            );
            summary.insert("correlation_degenerate".into(), corr.degenerate.into());
        }
        if all || args.mds {
            let mds = mds_projection(&corr.edit_matrix)?;
            run.write("mds.csv", &points_csv(&corr.tsi, &mds.points))?;
            let classes: Vec<usize> = corr
                .tsi
                .iter()
                .map(|&t| data.style_of_tsi(t))
                .collect();
            run.write(
                "mds.svg",
                &scatter_svg(&corr.tsi, &mds.points, &classes, "output distance MDS"),
            )?;
            summary.insert("mds_degenerate".into(), mds.degenerate.into());
        }
    }

    if all || args.substitutions {
        let tsis: Vec<u32> = ckpt
            .model
            .style_table()?
            .registered()
            .iter()
            .map(|&(t, _)| t)
            .collect();
        let table = substitution_stats(&ckpt.model, &data.alphabet, &lines, &tsis)?;
        run.write("substitutions.csv", &substitution_csv(&table))?;
        summary.insert("substitution_rows".into(), table.rows.len().into());
    }

    let files = run.files.clone();
    run.finish(&serde_json::json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "split": args.split,
        "lines": lines.len(),
    }))?;
    summary.insert("files".into(), serde_json::json!(files));
    println!("{}", serde_json::Value::Object(summary));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(a) => run_gen(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Decode(a) => run_decode(a),
        Cmd::Adapt(a) => run_adapt(a),
        Cmd::Analyze(a) => run_analyze(a),
    }
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("TSNET_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("{}", serde_json::json!({ "error": "--threads must be positive" }));
            std::process::exit(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            std::process::exit(2);
        }
    }
    if let Err(e) = dispatch(cli) {
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        std::process::exit(1);
    }
}
