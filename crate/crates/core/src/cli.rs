//! The `rstar` command line: `synth`, `train`, `eval`, `gradcheck`.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error. Every output file is written atomically and accompanied by a
//! `manifest.json` recording the resolved configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use crate::data::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic, Checkpoint};
use crate::data::synth::{synth_generate, SyntheticConfig};
use crate::data::Dataset;
use crate::evaluation::{evaluate, selection_quality, EvalOptions};
use crate::geometry::{OverlapBounds, ProposalSet};
use crate::gradcheck::run_suite;
use crate::network::{LossKind, Mode, ModelConfig};
use crate::proposals::{generate, load_proposals, ProposalConfig};
use crate::training::{prepare, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "rstar", version, about = "Action recognition with a latent contextual region")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted contextual cues.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-class AP, PR curves and selections.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Action classes, including the cue-less class.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..=8))]
    classes: u64,
    /// Generate the multi-label variant with this many attributes instead.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=7))]
    attributes: Option<u64>,
    #[arg(long, default_value_t = 500)]
    train_instances: usize,
    #[arg(long, default_value_t = 200)]
    test_instances: usize,
    #[arg(long, default_value_t = 1)]
    distractors: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Side length of the cue glyphs in pixels.
    #[arg(long, default_value_t = 16)]
    glyph_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Rstar,
    Rcnn,
    Random,
    Scene,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Rstar => Mode::Rstar,
            ModeArg::Rcnn => Mode::Rcnn,
            ModeArg::Random => Mode::Random,
            ModeArg::Scene => Mode::Scene,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Softmax,
    Multilabel,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Proposals file; defaults to the built-in grid generator.
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "rstar")]
    mode: ModeArg,
    /// Lower overlap bound of the candidate set.
    #[arg(long, alias = "l")]
    lower: Option<f64>,
    /// Upper overlap bound of the candidate set.
    #[arg(long, alias = "u")]
    upper: Option<f64>,
    /// Greedily selected secondary regions.
    #[arg(long, alias = "ns")]
    secondary_count: Option<usize>,
    /// Candidates sampled per primary.
    #[arg(long, alias = "n")]
    samples: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, alias = "iters")]
    iterations: Option<usize>,
    #[arg(long)]
    batch_primaries: Option<usize>,
    #[arg(long)]
    images_per_batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to multilabel for multi-label datasets, softmax otherwise.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Also write `model-<iteration>.ckpt` every this many iterations.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    proposals: Option<PathBuf>,
    /// Score frames (max over their instances) instead of instances.
    #[arg(long)]
    frame_level: bool,
    /// Add the overlap of each selected region with the planted cues.
    #[arg(long)]
    cue_overlap: bool,
    /// Report 11-point interpolated AP.
    #[arg(long)]
    interpolated: bool,
    /// Seed of the random-mode stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
}

/// A problem with the command line rather than with the run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    version: String,
    seed: u64,
    config: C,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, seed: u64, config: C, outputs: &[&str], started: u64) -> anyhow::Result<()> {
    let m = RunManifest {
        command,
        version: format!("v{}", env!("CARGO_PKG_VERSION")),
        seed,
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        started_unix: started,
        finished_unix: now(),
    };
    let text = serde_json::to_string_pretty(&m)? + "\n";
    write_atomic(dir.join("manifest.json"), text.as_bytes())?;
    Ok(())
}

/// Proposals for every image of a dataset, from a file or the grid generator.
fn proposal_source(ds: &Dataset, file: Option<&Path>) -> anyhow::Result<BTreeMap<String, ProposalSet>> {
    match file {
        Some(path) => {
            let extents: BTreeMap<&str, _> = ds.images.iter().map(|r| (r.id.as_str(), r.image.extent())).collect();
            let sets = load_proposals(path, |id| extents.get(id).copied())?;
            for rec in &ds.images {
                if !rec.instances.is_empty() && !sets.contains_key(&rec.id) {
                    bail!("{}: no proposals for image {}", path.display(), rec.id);
                }
            }
            Ok(sets)
        }
        None => {
            let cfg = ProposalConfig::default();
            ds.images
                .iter()
                .map(|r| Ok((r.id.clone(), generate(&r.id, r.image.extent(), &cfg)?)))
                .collect()
        }
    }
}

fn lookup(sets: &BTreeMap<String, ProposalSet>) -> impl Fn(&str) -> crate::Result<ProposalSet> + Sync + '_ {
    move |id| sets.get(id).cloned().ok_or(crate::Error::NoProposals)
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = SyntheticConfig {
        classes: a.classes as usize,
        attributes: a.attributes.map(|k| k as usize),
        train_instances: a.train_instances,
        test_instances: a.test_instances,
        distractors: a.distractors,
        noise: a.noise,
        glyph_size: a.glyph_size,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (train_ds, test_ds) = synth_generate(&cfg)?;
    save_dataset(a.out.join("train"), &train_ds)?;
    save_dataset(a.out.join("test"), &test_ds)?;
    let mut cues = String::from("split,image,class,x1,y1,x2,y2\n");
    for (split, ds) in [("train", &train_ds), ("test", &test_ds)] {
        for rec in &ds.images {
            if let Some(inst) = rec.instances.first() {
                for c in &inst.cues {
                    let r = c.region;
                    let _ = writeln!(cues, "{split},{},{},{},{},{},{}", rec.id, ds.classes[c.class], r.x1(), r.y1(), r.x2(), r.y2());
                }
            }
        }
    }
    write_atomic(a.out.join("cues.csv"), cues.as_bytes())?;
    write_manifest(&a.out, "synth", a.seed, &cfg, &["train", "test", "cues.csv"], started)?;
    println!(
        "wrote {} train and {} test instances to {}",
        train_ds.num_instances(),
        test_ds.num_instances(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let started = now();
    let mode: Mode = a.mode.into();
    let ds = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let defaults = TrainConfig::default();
    if mode == Mode::Rcnn && (a.lower.is_some() || a.upper.is_some() || a.samples.is_some() || a.secondary_count.is_some()) {
        warn!("rcnn mode ignores --lower, --upper, --samples and --secondary-count");
    }
    let bounds = OverlapBounds::new(
        a.lower.unwrap_or(defaults.bounds.lower()),
        a.upper.unwrap_or(defaults.bounds.upper()),
    )
    .map_err(|e| usage(e.to_string()))?;
    let loss = match a.loss {
        Some(LossArg::Softmax) => LossKind::Softmax,
        Some(LossArg::Multilabel) => LossKind::Multilabel,
        None if ds.multilabel => LossKind::Multilabel,
        None => LossKind::Softmax,
    };
    if ds.multilabel && loss == LossKind::Softmax {
        return Err(usage("a multi-label dataset needs --loss multilabel"));
    }
    let tcfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        batch_primaries: a.batch_primaries.unwrap_or(defaults.batch_primaries),
        images_per_batch: a.images_per_batch.unwrap_or(defaults.images_per_batch),
        secondary_samples: a.samples.unwrap_or(defaults.secondary_samples),
        iterations: a.iterations.unwrap_or(defaults.iterations),
        bounds,
        mode,
        secondary_count: a.secondary_count.unwrap_or(defaults.secondary_count),
        loss,
        seed: a.seed,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        checkpoint_interval: a.checkpoint_every.map(|k| k as usize),
    };
    tcfg.validate().map_err(|e| usage(e.to_string()))?;
    let sets = proposal_source(&ds, a.proposals.as_deref())?;
    let prepared = prepare(&ds, &lookup(&sets), bounds)?;
    let mut model = ModelConfig::new(ds.classes.clone());
    if let Some(first) = ds.images.first() {
        model.width = first.image.width();
        model.height = first.image.height();
    }
    model.validate().map_err(|e| usage(e.to_string()))?;
    info!("training {} on {} images for {} iterations", mode, prepared.len(), tcfg.iterations);
    let out_dir = a.out.clone();
    let mut outputs = vec!["model.ckpt".to_string(), "loss.csv".to_string()];
    let mut saved = Vec::new();
    let outcome = train(&prepared, &model, &tcfg, |it, m, p| {
        let name = format!("model-{it}.ckpt");
        save_checkpoint(
            out_dir.join(&name),
            &Checkpoint {
                model: m.clone(),
                train: Some(tcfg.clone()),
                params: p.clone(),
            },
        )?;
        saved.push(name);
        Ok(())
    })?;
    outputs.extend(saved);
    save_checkpoint(
        a.out.join("model.ckpt"),
        &Checkpoint {
            model: outcome.model.clone(),
            train: Some(tcfg.clone()),
            params: outcome.params,
        },
    )?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i + 1, l);
    }
    write_atomic(a.out.join("loss.csv"), csv.as_bytes())?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        data: &'a Path,
        proposals: Option<&'a Path>,
        model: &'a ModelConfig,
        train: &'a TrainConfig,
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(
        &a.out,
        "train",
        a.seed,
        Resolved {
            data: &a.data,
            proposals: a.proposals.as_deref(),
            model: &outcome.model,
            train: &tcfg,
        },
        &refs,
        started,
    )?;
    if let Some(last) = outcome.losses.last() {
        println!("final loss {last:.6}; checkpoint {}", a.out.join("model.ckpt").display());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let started = now();
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ds = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let sets = proposal_source(&ds, a.proposals.as_deref())?;
    let opts = EvalOptions {
        frame_level: a.frame_level,
        seed: a.seed,
    };
    let report = evaluate(&ds, &lookup(&sets), &ck.params, &ck.model, &opts)?;
    let mut text = report.to_text(a.interpolated);
    if a.cue_overlap {
        let q = selection_quality(&report, 0.3);
        let _ = writeln!(text, "cue_selection.eligible: {}", q.eligible);
        let _ = writeln!(text, "cue_selection.hits: {}", q.hits);
        let _ = writeln!(text, "cue_selection.fraction: {:.6}", q.fraction);
    }
    write_atomic(a.out.join("report.txt"), text.as_bytes())?;
    write_atomic(a.out.join("pr.csv"), report.pr_csv().as_bytes())?;
    write_atomic(a.out.join("scores.csv"), report.scores_csv().as_bytes())?;
    write_atomic(a.out.join("selections.csv"), report.selections_csv(a.cue_overlap).as_bytes())?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        checkpoint: &'a Path,
        data: &'a Path,
        proposals: Option<&'a Path>,
        frame_level: bool,
        cue_overlap: bool,
        interpolated: bool,
        model: &'a ModelConfig,
    }
    write_manifest(
        &a.out,
        "eval",
        a.seed,
        Resolved {
            checkpoint: &a.checkpoint,
            data: &a.data,
            proposals: a.proposals.as_deref(),
            frame_level: a.frame_level,
            cue_overlap: a.cue_overlap,
            interpolated: a.interpolated,
            model: &ck.model,
        },
        &["report.txt", "pr.csv", "scores.csv", "selections.csv"],
        started,
    )?;
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<bool> {
    let results = run_suite(a.seed, a.seeds as usize)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        println!(
            "{} {:<24} seed {:<3} rel_err {:.3e} tol {:.0e} coords {} resamples {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seed,
            r.max_rel_error,
            r.tolerance,
            r.coordinates,
            r.resamples
        );
    }
    println!("{} of {} checks passed", results.iter().filter(|r| r.passed).count(), results.len());
    Ok(ok)
}

/// `RSTAR_THREADS` caps the worker pool; unset, training runs on one thread
/// and everything else on all cores. Results do not depend on the count.
fn configure_threads(default: Option<usize>) -> anyhow::Result<()> {
    let n = match std::env::var("RSTAR_THREADS") {
        Ok(v) => Some(
            v.parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .ok_or_else(|| usage(format!("RSTAR_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => default,
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    configure_threads(matches!(cli.command, Command::Train(_)).then_some(1))?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
