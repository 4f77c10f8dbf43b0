//! `qseg`: synthesize data, train, evaluate, run inference and check gradients.

mod overrides;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qseg_core::checkpoint::Checkpoint;
use qseg_core::data::{
    build_samples, load_image, load_split, synth_generate, SynthConfig, ANNOTATIONS_FILE,
};
use qseg_core::gradcheck_suite::{registry, run_suite};
use qseg_core::infer::{check_vocabulary, evaluate, predict, write_inference};
use qseg_core::metrics::ThresholdGrid;
use qseg_core::train::{train, TrainState};
use qseg_core::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "qseg",
    version,
    about = "Query-based instance segmentation with attribute recognition"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every source of randomness (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override such as `model.stages=1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a per-step loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotated split.
    Eval(EvalArgs),
    /// Predict instances for one image and render an overlay.
    Infer(InferArgs),
    /// Finite-difference gradient checks over every registered op.
    Gradcheck,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for PNGs and the annotation file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    min_shapes: usize,
    #[arg(long, default_value_t = 3)]
    max_shapes: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Annotation file of the training split (overrides `data.train`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long, default_value = "model.qsl")]
    out: PathBuf,
    /// Loss log, one JSON object per step; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint (its config is used, overrides still apply).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Number of optimizer steps (overrides `optim.steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Print progress every this many steps.
    #[arg(long, default_value_t = 50)]
    print_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotation file of the evaluation split (overrides `data.eval`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate at one IoU threshold instead of the 0.50:0.05:0.95 grid.
    #[arg(long)]
    iou: Option<f64>,
    /// Single attribute-F1 threshold for the joint metric; requires `--iou`.
    #[arg(long, requires = "iou")]
    f1: Option<f64>,
    /// Key-value report file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "infer_out")]
    out: PathBuf,
}

fn load_config(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    cfg = overrides::apply(&cfg, &common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn synth(common: &Common, args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        height: args.height,
        width: args.width,
        num_images: args.images,
        min_shapes: args.min_shapes,
        max_shapes: args.max_shapes,
        seed: common.seed.unwrap_or(0),
        ..SynthConfig::default()
    };
    let syn = synth_generate(&cfg)?;
    syn.save(&args.out)?;
    println!(
        "wrote {} images, {} instances to {}",
        syn.images.len(),
        syn.dataset.instances.len(),
        args.out.join(ANNOTATIONS_FILE).display()
    );
    Ok(())
}

fn run_train(common: &Common, args: &TrainArgs) -> Result<()> {
    let resumed = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = load_config(common, resumed.as_ref().map(|c| c.config.clone()))?;
    if let Some(steps) = args.steps {
        cfg.optim.steps = steps;
    }
    if let Some(d) = &args.data {
        cfg.data.train = Some(d.clone());
    }
    let Some(data) = cfg.data.train.clone() else {
        bail!("no training data: pass --data or set data.train");
    };
    let (dataset, images) =
        load_split(&data).with_context(|| format!("loading {}", data.display()))?;
    let samples = build_samples(&dataset, &images)?;
    let mut state = match resumed {
        Some(ck) => {
            if ck.vocabulary.as_ref().is_some_and(|v| v != &dataset.header) {
                bail!("dataset vocabulary differs from the one the checkpoint was trained on");
            }
            let mut st = ck.into_state()?;
            st.optimizer.cfg = cfg.optim.clone();
            st
        }
        None => TrainState::init(&cfg)?,
    };
    check_vocabulary(&state.model, &dataset.header)?;

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let start = Instant::now();
    let every = args.print_every.max(1);
    let mut io_error = None;
    train(&mut state, &cfg, &samples, |e| {
        if let Err(err) = serde_json::to_writer(&mut log, e)
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(writeln!(log)?))
        {
            io_error.get_or_insert(err);
        }
        if e.step % every == 0 || e.step + 1 == cfg.optim.steps {
            eprintln!(
                "step {:>5}  loss {:.4}  lr {:.2e}  {:.1}s",
                e.step,
                e.total,
                e.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(err) = io_error {
        return Err(err.context(format!("writing {}", log_path.display())));
    }
    log.flush()?;
    Checkpoint::from_state(&state, &cfg, Some(dataset.header.clone())).save(&args.out)?;
    println!(
        "checkpoint {} (step {}), log {}",
        args.out.display(),
        state.optimizer.step,
        log_path.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = load_config(common, Some(ck.config.clone()))?;
    let data = args
        .data
        .clone()
        .or(cfg.data.eval.clone())
        .context("no evaluation data: pass --data or set data.eval")?;
    let (dataset, images) =
        load_split(&data).with_context(|| format!("loading {}", data.display()))?;
    if let Some(v) = &ck.vocabulary {
        if v != &dataset.header {
            bail!("dataset vocabulary differs from the one the checkpoint was trained on");
        }
    }
    let grid = match args.iou {
        Some(iou) => ThresholdGrid::single(iou, args.f1.unwrap_or(iou)),
        None => ThresholdGrid::coco(),
    };
    let report = evaluate(&ck.model()?, &dataset, &images, &grid)?;
    print!("{}", report.to_table());
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_key_values())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_infer(args: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let vocab = ck
        .vocabulary
        .clone()
        .context("checkpoint carries no vocabulary; retrain with `qseg train`")?;
    let image = load_image(&args.image)?;
    let model = ck.model()?;
    let preds = predict(&model, &image)?;
    let stem = args
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let kept = write_inference(&image, &preds, &vocab, &args.out, stem)?;
    for (k, d) in kept.iter().enumerate() {
        println!(
            "#{k} {} score={:.3} attributes=[{}]",
            d.category_name,
            d.score,
            d.attribute_names.join(", ")
        );
    }
    println!(
        "{} instances; outputs in {}",
        kept.len(),
        args.out.display()
    );
    Ok(())
}

fn run_gradcheck(common: &Common) -> Result<bool> {
    let report = run_suite(common.seed.unwrap_or(0), &registry());
    print!("{}", report.to_text());
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(&cli.common, a).map(|_| true),
        Command::Train(a) => run_train(&cli.common, a).map(|_| true),
        Command::Eval(a) => run_eval(&cli.common, a).map(|_| true),
        Command::Infer(a) => run_infer(a).map(|_| true),
        Command::Gradcheck => run_gradcheck(&cli.common),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
