//! Command-line entry points: `gen-data`, `train`, `eval`, `diagnose`,
//! `gradcheck`.
//!
//! Config precedence is flags over config file over built-in defaults; the
//! resolved snapshot is persisted as `run_manifest.json` in the output
//! directory, and a manifest file can be passed back via `--config` to
//! reproduce a run.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::feature_store::{generate_synthetic, Dataset, SyntheticConfig};
use crate::losses::{DclMode, GateComparison, MtrlMode};
use crate::model::Topology;
use crate::retrieval_eval::{evaluate_model, iou_to_csv, space_labels, EvalOptions};
use crate::trainer::{gradcheck, train, GradCheckDims, TrainingConfig};

#[derive(Parser, Debug)]
#[command(
    name = "lpd",
    about = "Multi-space cross-modal retrieval: train, evaluate, diagnose",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic desk-scale benchmark
    GenData(GenDataArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Rank the test collection and report AP/mAP/P@k and inter-space IoU
    Eval(EvalArgs),
    /// Emit the per-space top-k IoU matrix for a trained model
    Diagnose(EvalArgs),
    /// Verify analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

fn parse_topology(s: &str) -> std::result::Result<Topology, String> {
    Topology::parse(s).ok_or_else(|| format!("unknown topology '{s}' (lpd | parallel-heads)"))
}

fn parse_dcl(s: &str) -> std::result::Result<DclMode, String> {
    DclMode::parse(s).ok_or_else(|| format!("unknown dcl mode '{s}' (partial | full | off)"))
}

fn parse_mtrl(s: &str) -> std::result::Result<MtrlMode, String> {
    MtrlMode::parse(s).ok_or_else(|| format!("unknown mtrl mode '{s}' (ef | plain)"))
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// JSON config file (flags override it)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of test queries
    #[arg(long)]
    queries: Option<usize>,
    /// Relevance clusters per query
    #[arg(long)]
    clusters: Option<usize>,
    /// Relevant videos per cluster
    #[arg(long)]
    relevant: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    val_queries: Option<usize>,
    #[arg(long)]
    train_topics: Option<usize>,
    #[arg(long)]
    captions: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Overwrite an existing output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (from gen-data or external)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs
    #[arg(long)]
    out: PathBuf,
    /// JSON config file (flags override it)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_topology)]
    topology: Option<Topology>,
    #[arg(long, value_parser = parse_dcl)]
    dcl: Option<DclMode>,
    #[arg(long, value_parser = parse_mtrl)]
    mtrl: Option<MtrlMode>,
    #[arg(long)]
    dcl_weight: Option<f64>,
    /// Batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Triplet margin
    #[arg(long)]
    margin: Option<f64>,
    /// Common-space dimension
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Ranking depth for validation mAP
    #[arg(long)]
    depth: Option<usize>,
    /// Worker threads for validation scoring (default: available parallelism)
    #[arg(long)]
    threads: Option<usize>,
    /// Use the strict > gate comparison from the gating rule
    #[arg(long)]
    strict_gate: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file, or a train output directory (its best checkpoint)
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split to evaluate: test | val
    #[arg(long)]
    split: Option<String>,
    /// Ranking depth for AP
    #[arg(long)]
    depth: Option<usize>,
    /// Precision@k cutoff
    #[arg(long)]
    k: Option<usize>,
    /// Top-k for inter-space IoU sets
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; seed i of --seeds derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Number of random models to check
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, value_parser = parse_topology)]
    topology: Option<Topology>,
    #[arg(long, value_parser = parse_dcl)]
    dcl: Option<DclMode>,
    #[arg(long, value_parser = parse_mtrl)]
    mtrl: Option<MtrlMode>,
    /// Check every {ef, plain} x {off, partial, full} arm
    #[arg(long)]
    all_arms: bool,
    /// Finite-difference step
    #[arg(long)]
    step: Option<f64>,
    /// Pass threshold on the relative error
    #[arg(long)]
    tol: Option<f64>,
    /// Optional directory for the report and manifest
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The persisted record of one run: subcommand, paths, and the fully
/// resolved config snapshot.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub config: serde_json::Value,
}

fn load_config_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("bad JSON: {e}")))?;
    // a run manifest round-trips: unwrap its embedded snapshot
    if let Some(inner) = value.get("config") {
        if value.get("subcommand").is_some() {
            return Ok(inner.clone());
        }
    }
    Ok(value)
}

/// Base config from file (or default), with `apply` layering flags on top.
fn resolve_config<T: serde::de::DeserializeOwned + Default>(
    config_path: Option<&Path>,
    apply: impl FnOnce(&mut T),
) -> Result<T> {
    let mut cfg: T = match config_path {
        Some(p) => {
            let value = load_config_value(p)?;
            serde_json::from_value(value)
                .map_err(|e| Error::format(p, format!("config does not match schema: {e}")))?
        }
        None => T::default(),
    };
    apply(&mut cfg);
    Ok(cfg)
}

fn write_manifest<T: serde::Serialize>(
    out: &Path,
    subcommand: &str,
    data: Option<&Path>,
    cfg: &T,
) -> Result<()> {
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        data: data.map(|p| p.to_path_buf()),
        out: Some(out.to_path_buf()),
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out.join("run_manifest.json"), text + "\n").map_err(|e| Error::io(out, e))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct GenDataConfig {
    seed: u64,
    #[serde(flatten)]
    synthetic: SyntheticConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg: GenDataConfig = resolve_config(args.config.as_deref(), |c: &mut GenDataConfig| {
        let s = &mut c.synthetic;
        set(&mut c.seed, args.seed);
        set(&mut s.queries, args.queries);
        set(&mut s.clusters_per_query, args.clusters);
        set(&mut s.relevant_per_cluster, args.relevant);
        set(&mut s.distractors, args.distractors);
        set(&mut s.val_queries, args.val_queries);
        set(&mut s.train_topics, args.train_topics);
        set(&mut s.captions_per_video, args.captions);
        set(&mut s.noise, args.noise);
    })?;

    if args.out.exists() && !args.force {
        return Err(Error::Config(format!(
            "output directory {} exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let ds = generate_synthetic(&cfg.synthetic, cfg.seed)?;
    ds.save(&args.out)?;
    write_manifest(&args.out, "gen-data", None, &cfg)?;
    println!(
        "wrote dataset to {} ({} train pairs, {} videos, {} test queries)",
        args.out.display(),
        ds.train.pairs.len(),
        ds.video_tables[0].len(),
        ds.test.relevance.len()
    );
    Ok(())
}

fn set<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg: TrainingConfig = resolve_config(args.config.as_deref(), |c: &mut TrainingConfig| {
        set(&mut c.seed, args.seed);
        set(&mut c.topology, args.topology);
        set(&mut c.loss.dcl_mode, args.dcl);
        set(&mut c.loss.mtrl_mode, args.mtrl);
        set(&mut c.loss.dcl_weight, args.dcl_weight);
        set(&mut c.batch_size, args.batch);
        set(&mut c.initial_lr, args.lr);
        set(&mut c.loss.margin, args.margin);
        set(&mut c.d, args.d);
        set(&mut c.max_epochs, args.max_epochs);
        set(&mut c.patience, args.patience);
        set(&mut c.eval.depth, args.depth);
        c.eval.threads = args.threads.unwrap_or_else(default_threads);
        if args.strict_gate {
            c.loss.gate_comparison = GateComparison::Strict;
        }
    })?;

    let ds = Dataset::load(&args.data)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_manifest(&args.out, "train", Some(&args.data), &cfg)?;
    let outcome = train(&ds, &cfg, Some(&args.out))?;
    println!(
        "trained {} epochs (best val mAP {:.4} at epoch {}); outputs in {}",
        outcome.final_state.epoch,
        outcome.best_val_map,
        outcome.best_epoch,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct EvalConfig {
    split: String,
    depth: usize,
    precision_k: usize,
    iou_k: usize,
    chunk_size: usize,
    threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            depth: 1000,
            precision_k: 20,
            iou_k: 20,
            chunk_size: 512,
            threads: 0, // 0: available parallelism
        }
    }
}

fn resolve_checkpoint_path(given: &Path) -> Result<PathBuf> {
    if given.is_dir() {
        let pointer = given.join("best.txt");
        let name = fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
        Ok(given.join(name.trim()))
    } else {
        Ok(given.to_path_buf())
    }
}

fn load_matching_model(ckpt_path: &Path, ds: &Dataset) -> Result<crate::model::ModelParams> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let params = ckpt.params;
    if params.text_dims() != ds.text_dims() || params.video_dims() != ds.video_dims() {
        return Err(Error::Config(format!(
            "checkpoint dims (text {:?}, video {:?}) do not match dataset (text {:?}, video {:?})",
            params.text_dims(),
            params.video_dims(),
            ds.text_dims(),
            ds.video_dims()
        )));
    }
    Ok(params)
}

fn eval_config_from(args: &EvalArgs) -> Result<EvalConfig> {
    resolve_config(args.config.as_deref(), |c: &mut EvalConfig| {
        set(&mut c.split, args.split.clone());
        set(&mut c.depth, args.depth);
        set(&mut c.precision_k, args.k);
        set(&mut c.iou_k, args.topk);
        set(&mut c.chunk_size, args.chunk);
        set(&mut c.threads, args.threads);
    })
}

fn run_eval(args: &EvalArgs, diagnose_only: bool) -> Result<()> {
    let cfg = eval_config_from(args)?;
    let ds = Dataset::load(&args.data)?;
    let ckpt_path = resolve_checkpoint_path(&args.checkpoint)?;
    let params = load_matching_model(&ckpt_path, &ds)?;
    let split = match cfg.split.as_str() {
        "test" => &ds.test,
        "val" => &ds.val,
        other => return Err(Error::Config(format!("unknown split '{other}' (test | val)"))),
    };
    let opts = EvalOptions {
        depth: cfg.depth,
        precision_k: cfg.precision_k,
        iou_k: cfg.iou_k,
        chunk_size: cfg.chunk_size,
        threads: if cfg.threads == 0 {
            default_threads()
        } else {
            cfg.threads
        },
    };
    let report = evaluate_model(&params, &ds, split, &opts)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_manifest(&args.out, if diagnose_only { "diagnose" } else { "eval" }, Some(&args.data), &cfg)?;
    if let Some(iou) = &report.iou {
        let labels = space_labels(&ds, params.spaces());
        fs::write(args.out.join("iou.csv"), iou_to_csv(iou, &labels))
            .map_err(|e| Error::io(&args.out, e))?;
    }
    if diagnose_only {
        let mean = report.iou.as_ref().map_or(f64::NAN, |i| i.mean_off_diagonal);
        println!("mean inter-space IoU@{}: {:.4}", opts.iou_k, mean);
        return Ok(());
    }
    fs::write(args.out.join("eval_report.csv"), report.to_csv())
        .map_err(|e| Error::io(&args.out, e))?;
    // exact AP over complete desk-scale judgments (infAP needs sampled pools)
    let summary = format!("metric: exact AP over full judgments\n{}", report.summary());
    fs::write(args.out.join("summary.txt"), &summary).map_err(|e| Error::io(&args.out, e))?;
    print!("{summary}");
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct GradcheckConfig {
    seed: u64,
    seeds: u64,
    topology: Topology,
    dcl: DclMode,
    mtrl: MtrlMode,
    all_arms: bool,
    step: f64,
    tolerance: f64,
    dims: GradCheckDims,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            seeds: 20,
            topology: Topology::FeatureSpecific,
            dcl: DclMode::Partial,
            mtrl: MtrlMode::EfGated,
            all_arms: false,
            step: 1e-5,
            tolerance: 1e-4,
            dims: GradCheckDims::default(),
        }
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg: GradcheckConfig = resolve_config(args.config.as_deref(), |c: &mut GradcheckConfig| {
        set(&mut c.seed, args.seed);
        set(&mut c.seeds, args.seeds);
        set(&mut c.topology, args.topology);
        set(&mut c.dcl, args.dcl);
        set(&mut c.mtrl, args.mtrl);
        set(&mut c.step, args.step);
        set(&mut c.tolerance, args.tol);
        if args.all_arms {
            c.all_arms = true;
        }
    })?;

    let arms: Vec<(MtrlMode, DclMode)> = if cfg.all_arms {
        let mut arms = Vec::new();
        for mtrl in [MtrlMode::PlainSum, MtrlMode::EfGated] {
            for dcl in [DclMode::Off, DclMode::Partial, DclMode::Full] {
                arms.push((mtrl, dcl));
            }
        }
        arms
    } else {
        vec![(cfg.mtrl, cfg.dcl)]
    };

    let mut all_passed = true;
    let mut report_text = String::new();
    for (mtrl, dcl) in arms {
        let loss_cfg = crate::losses::LossConfig {
            dcl_mode: dcl,
            mtrl_mode: mtrl,
            ..crate::losses::LossConfig::default()
        };
        let mut worst: f64 = 0.0;
        let mut restarts = 0;
        for i in 0..cfg.seeds {
            let out = gradcheck(
                cfg.topology,
                &loss_cfg,
                &cfg.dims,
                cfg.seed.wrapping_add(i),
                cfg.step,
                cfg.tolerance,
            )?;
            worst = worst.max(out.max_rel_error);
            restarts += out.restarts;
            if !out.passed {
                all_passed = false;
                for r in out.reports.iter().filter(|r| r.rel_error >= cfg.tolerance) {
                    report_text.push_str(&format!(
                        "FAIL seed {} {} {} {}: analytic {} numeric {} rel-error {}\n",
                        cfg.seed.wrapping_add(i),
                        mtrl.as_str(),
                        dcl.as_str(),
                        r.parameter,
                        r.analytic,
                        r.numeric,
                        r.rel_error
                    ));
                }
            }
        }
        let line = format!(
            "arm mtrl={} dcl={}: {} seeds, max rel-error {:.3e}, restarts {}: {}\n",
            mtrl.as_str(),
            dcl.as_str(),
            cfg.seeds,
            worst,
            restarts,
            if worst < cfg.tolerance { "PASS" } else { "FAIL" }
        );
        report_text.push_str(&line);
        print!("{line}");
    }

    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_manifest(out, "gradcheck", None, &cfg)?;
        fs::write(out.join("gradcheck.txt"), &report_text).map_err(|e| Error::io(out, e))?;
    }
    if all_passed {
        Ok(())
    } else {
        Err(Error::Data("gradient check failed".into()))
    }
}

/// Parse and run; returns the process exit code.
pub fn main_entry<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => run_eval(&args, false),
        Command::Diagnose(args) => run_eval(&args, true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => 0,
        Err(Error::Config(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
