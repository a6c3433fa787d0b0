//! `sclmetric`: synthesize embeddings, train, evaluate and compare losses.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sclmetric::dataset::{generate_synthetic, generate_with_ids, load_embeddings, save_embeddings, Dataset, SynthConfig};
use sclmetric::error::ErrorKind;
use sclmetric::evaluation::{distractor_gallery, evaluate_repetition, repeated_evaluation, EvalReport};
use sclmetric::model::{load_checkpoint, save_checkpoint, CheckpointMeta};
use sclmetric::report::{compare, write_compare_outputs, write_eval_outputs, write_train_log, EvalRunReport, RunConfig, REPORT_FORMAT_VERSION};
use sclmetric::training::{train, LossKind, TrainConfig};
use sclmetric::{Error, Result};

const SEED_ENV: &str = "SCLMETRIC_SEED";

#[derive(Parser)]
#[command(name = "sclmetric", version, about = "Subclass contrastive metric learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding dataset as CSV.
    Synth(SynthArgs),
    /// Train one model and write a checkpoint and a per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split, or train and evaluate every split.
    Eval(EvalArgs),
    /// Train CL, TL and SCL on identical splits and tabulate rank accuracies.
    Compare(CommonArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Easy,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Regime {
    Paper,
    Synthetic,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config; falls back to $SCLMETRIC_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding CSV; synthesized from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the synth section with a built-in preset.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Replace the train section with a built-in regime.
    #[arg(long, value_enum)]
    regime: Option<Regime>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    /// Margin of the CL or TL loss selected by --loss.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Number of leading layers kept fixed.
    #[arg(long)]
    freeze: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Embedding CSV whose subjects join the gallery as distractors.
    #[arg(long)]
    extended_gallery: Option<PathBuf>,
    /// Unit-normalize embeddings for the inter-class distance statistic.
    #[arg(long, conflicts_with = "no_normalize")]
    normalize: bool,
    /// Use raw embeddings for the inter-class distance statistic.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Scl,
    Cl,
    Tl,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Scl => LossKind::Scl,
            LossArg::Cl => LossKind::Cl,
            LossArg::Tl => LossKind::Tl,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the number of subjects.
    #[arg(long)]
    subjects: Option<usize>,
    /// Id of the first generated subject, for distractor sets.
    #[arg(long, default_value_t = 0)]
    first_id: u32,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Train only on the train side of this split repetition.
    #[arg(long)]
    repetition: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Evaluate this checkpoint instead of training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split repetition evaluated with --checkpoint.
    #[arg(long, default_value_t = 0)]
    repetition: usize,
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Config file, then presets, then seed, then individual flags.
fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = args.preset {
        cfg.synth = match p {
            Preset::Easy => SynthConfig::easy(cfg.synth.seed),
            Preset::Hard => SynthConfig::hard(cfg.synth.seed),
        };
    }
    if let Some(r) = args.regime {
        let seed = cfg.train.seed;
        cfg.train = match r {
            Regime::Paper => TrainConfig::paper_regime(),
            Regime::Synthetic => TrainConfig::synthetic_regime(),
        };
        cfg.train.seed = seed;
    }
    let seed = match args.seed.or(cfg.seed) {
        Some(s) => Some(s),
        None => seed_from_env()?,
    };
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }

    let t = &mut cfg.train;
    if let Some(l) = args.loss {
        t.loss = l.into();
    }
    if let Some(m) = args.margin {
        match t.loss {
            LossKind::Cl => t.cl_margin = m,
            LossKind::Tl => t.tl_margin = m,
            LossKind::Scl => {
                return Err(Error::Config("--margin applies to cl or tl; use --alpha1/--alpha2 for scl".into()))
            }
        }
    }
    t.alpha1 = args.alpha1.unwrap_or(t.alpha1);
    t.alpha2 = args.alpha2.unwrap_or(t.alpha2);
    t.learning_rate = args.lr.unwrap_or(t.learning_rate);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch.unwrap_or(t.batch_size);
    t.frozen_layers = args.freeze.unwrap_or(t.frozen_layers);
    cfg.split.repetitions = args.repetitions.unwrap_or(cfg.split.repetitions);
    if args.normalize {
        cfg.eval.normalize = true;
    }
    if args.no_normalize {
        cfg.eval.normalize = false;
    }
    let p = &mut cfg.paths;
    p.data = args.data.clone().or(p.data.take());
    p.out = args.out.clone().or(p.out.take());
    p.extended_gallery = args.extended_gallery.clone().or(p.extended_gallery.take());
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.paths.data {
        Some(path) => load_embeddings(path),
        None => generate_synthetic(&cfg.synth),
    }
}

fn distractors(cfg: &RunConfig) -> Result<Vec<sclmetric::dataset::Sample>> {
    Ok(match &cfg.paths.extended_gallery {
        Some(path) => distractor_gallery(&load_embeddings(path)?),
        None => Vec::new(),
    })
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(n) = args.subjects {
        cfg.synth.n_subjects = n;
    }
    let ds = generate_with_ids(&cfg.synth, args.first_id)?;
    let path = out_dir(&cfg)?.join("embeddings.csv");
    save_embeddings(&ds, &path)?;
    log::info!("wrote {} samples to {}", ds.n_samples(), path.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let mut ds = dataset(&cfg)?;
    if let Some(rep) = args.repetition {
        let (train_ids, _) = sclmetric::dataset::split_ids(&ds, &cfg.split, rep)?;
        ds = ds.subset(&train_ids.into_iter().collect());
    }
    let (model, log) = train(&ds, &cfg.train)?;
    let dir = out_dir(&cfg)?;
    let meta = CheckpointMeta {
        epochs: cfg.train.epochs as u64,
        seed: cfg.train.seed,
        frozen_layers: cfg.train.frozen_layers as u32,
        loss_history: log.loss_history(),
    };
    save_checkpoint(&model, &meta, dir.join("model.ckpt"))?;
    write_train_log(&dir.join("train_log.csv"), &log)?;
    log::info!("wrote {}", dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(ckpt) = &args.checkpoint {
        cfg.paths.checkpoint = Some(ckpt.clone());
    }
    let ds = dataset(&cfg)?;
    let extra = distractors(&cfg)?;
    let report = match &cfg.paths.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let rep = evaluate_repetition(&ckpt.model, &ds, &cfg.split, args.repetition, &cfg.eval, &extra)?;
            EvalReport::from_repetitions(vec![rep], &cfg.eval, !extra.is_empty())
        }
        None => repeated_evaluation(&ds, &cfg.split, &cfg.train, &cfg.eval, &extra)?,
    };
    let run = EvalRunReport {
        format_version: REPORT_FORMAT_VERSION,
        command: "eval".into(),
        config: cfg,
        report,
    };
    let dir = out_dir(&run.config)?;
    write_eval_outputs(&dir, &run)?;
    print_ranks(&run.report);
    Ok(())
}

fn print_ranks(report: &EvalReport) {
    for r in &report.summary.ranks {
        println!(
            "rank {:>2}: {:.2} ± {:.2} %",
            r.rank,
            100.0 * r.accuracy.mean,
            100.0 * r.accuracy.std
        );
    }
}

fn cmd_compare(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let ds = dataset(&cfg)?;
    let extra = distractors(&cfg)?;
    let report = compare(&ds, &cfg, &extra)?;
    let dir = out_dir(&cfg)?;
    write_compare_outputs(&dir, &report)?;
    print!("{}", sclmetric::report::compare_table_markdown(&report));
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
