//! Command-line front end: train, evaluate, analyze, generate data.
//!
//! Output on stdout is machine-parseable `key=value` lines. Errors go to
//! stderr and map to stable exit codes: 2 for usage, parameter, format, and
//! shape problems, 3 for data and file problems, 4 for numeric failures,
//! 5 for checkpoint problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use snn_core::analysis::{analyze_network, AnalysisConfig, Histogram, KlConfig};
use snn_core::checkpoint;
use snn_core::config::{apply_overrides, TrainConfig};
use snn_core::data::{synth_blobs, write_csv, write_idx, Dataset};
use snn_core::train::{evaluate, Trainer};
use snn_core::{Error, Result};

/// Writes one stdout line. A closed pipe is how a consumer like `head`
/// says it has seen enough: stop quietly instead of panicking.
fn emit(args: std::fmt::Arguments) {
    use std::io::Write;
    if let Err(e) = writeln!(std::io::stdout(), "{args}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: stdout write failed: {e}");
        std::process::exit(3);
    }
}

macro_rules! outln {
    ($($arg:tt)*) => { emit(format_args!($($arg)*)) };
}

#[derive(Parser)]
#[command(name = "snn-rmp", version, about = "Train and analyze small spiking classifiers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON config, or continue from a checkpoint.
    Train(TrainArgs),
    /// Report test-set accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Membrane-distribution analysis of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Write a synthetic blob dataset to disk.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; mutually exclusive with --resume.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Config override as dotted.path=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Stop after this many additional epochs instead of training to the
    /// end. The run can be continued later with --resume.
    #[arg(long, value_name = "N")]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint to analyze.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Restrict histograms to this layer index.
    #[arg(long)]
    layer: Option<usize>,
    /// Histogram bin count.
    #[arg(long)]
    bins: Option<usize>,
    /// Window half-width of the information-loss estimate.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Write scalars and histograms as JSON to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Features per sample. The idx format needs a perfect square.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    /// Gaussian spread around each class center.
    #[arg(long, default_value_t = 0.25)]
    spread: f64,
    /// Output format: csv or idx.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Directory the files are written into; created if missing.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Param(_) | Error::Format(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        Error::Checkpoint(_) => 5,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::GenData(args) => cmd_gen_data(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.stop_after == Some(0) {
        return Err(Error::Usage("--stop-after must be at least 1".into()));
    }
    let (mut trainer, train, test) = match (&args.config, &args.resume) {
        (Some(_), Some(_)) => {
            return Err(Error::Usage("pass --config or --resume, not both".into()))
        }
        (None, None) => {
            return Err(Error::Usage("one of --config or --resume is required".into()))
        }
        (Some(path), None) => Trainer::new(TrainConfig::load(path, &args.set)?)?,
        (None, Some(ckpt)) => resume_trainer(ckpt, &args.set)?,
    };
    let until = match args.stop_after {
        Some(n) => (trainer.epoch + n).min(trainer.cfg.epochs),
        None => trainer.cfg.epochs,
    };
    while trainer.epoch < until {
        let m = trainer.run_epoch(&train, &test)?;
        outln!(
            "epoch={} lambda={} lr={} train_loss={} rmp={} qerr={} acc={}",
            m.epoch, m.lambda, m.lr, m.train_loss, m.rmp, m.qerr, m.accuracy
        );
    }
    if let Some(path) = trainer.cfg.checkpoint_out.clone() {
        checkpoint::save(Path::new(&path), &trainer)?;
        outln!("checkpoint={path}");
    }
    // A report describes a finished run; a stopped run gets one when the
    // remaining epochs are trained.
    if trainer.is_complete() {
        if let Some(path) = trainer.cfg.report_out.clone() {
            write_report(Path::new(&path), &trainer, &test)?;
            outln!("report={path}");
        }
    }
    Ok(())
}

/// Overrides a resumed run accepts: output locations only. Anything that
/// feeds the trajectory would make the continued run diverge from the
/// uninterrupted one.
const RESUME_KEYS: [&str; 2] = ["checkpoint_out", "report_out"];

fn resume_trainer(ckpt: &Path, set: &[String]) -> Result<(Trainer, Dataset, Dataset)> {
    for ov in set {
        let key = ov.split_once('=').map_or(ov.as_str(), |(k, _)| k);
        if !RESUME_KEYS.contains(&key) {
            return Err(Error::Usage(format!(
                "--set {key} would change the training trajectory; \
                 a resumed run only accepts {RESUME_KEYS:?}"
            )));
        }
    }
    let (mut trainer, train, test) = checkpoint::load_with_data(ckpt)?;
    if !set.is_empty() {
        let mut value = serde_json::to_value(&trainer.cfg)
            .map_err(|e| Error::Format(format!("config echo: {e}")))?;
        apply_overrides(&mut value, set)?;
        trainer.cfg = TrainConfig::from_value(value)?;
    }
    Ok((trainer, train, test))
}

fn report_analysis_config(cfg: &TrainConfig) -> Result<AnalysisConfig> {
    let d = AnalysisConfig::default();
    AnalysisConfig::new(
        cfg.batch_size,
        KlConfig::new(cfg.kl_epsilon, cfg.kl_bins)?,
        d.hist_bins,
        d.hist_lo,
        d.hist_hi,
    )
}

fn histograms_json(hists: &[Histogram]) -> Vec<serde_json::Value> {
    hists
        .iter()
        .map(|h| {
            serde_json::json!({
                "layer": h.layer,
                "lo": h.lo,
                "hi": h.hi,
                "counts": h.counts,
                "underflow": h.underflow,
                "overflow": h.overflow,
                "total": h.total(),
            })
        })
        .collect()
}

fn write_json(path: &Path, doc: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_report(path: &Path, trainer: &Trainer, test: &Dataset) -> Result<()> {
    let cfg = &trainer.cfg;
    let acfg = report_analysis_config(cfg)?;
    let result = analyze_network(&trainer.net, test, cfg.p, &acfg)?;
    let report = serde_json::json!({
        "schema_version": "1",
        "config": {
            "train": cfg,
            "analysis": {
                "batch_size": acfg.batch_size,
                "kl_epsilon": acfg.kl.epsilon,
                "kl_bins": acfg.kl.bins,
                "hist_bins": acfg.hist_bins,
                "hist_lo": acfg.hist_lo,
                "hist_hi": acfg.hist_hi,
            },
        },
        "epochs": trainer.history,
        "final": {
            "accuracy": result.accuracy,
            "mean_quant_error": result.mean_quant_error,
            "kl_estimate": result.kl_estimate,
            "firing_rate": result.firing_rate,
        },
        "histograms": histograms_json(&result.histograms),
    });
    write_json(path, &report)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (trainer, _train, test) = checkpoint::load_with_data(&args.checkpoint)?;
    let (correct, total) = evaluate(&trainer.net, &test, trainer.cfg.batch_size)?;
    outln!(
        "correct={correct} total={total} accuracy={}",
        correct as f64 / total as f64
    );
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let (trainer, _train, test) = checkpoint::load_with_data(&args.checkpoint)?;
    let cfg = &trainer.cfg;
    let d = AnalysisConfig::default();
    let kl = KlConfig::new(args.epsilon.unwrap_or(cfg.kl_epsilon), cfg.kl_bins)?;
    let acfg = AnalysisConfig::new(
        cfg.batch_size,
        kl,
        args.bins.unwrap_or(d.hist_bins),
        d.hist_lo,
        d.hist_hi,
    )?;
    let result = analyze_network(&trainer.net, &test, cfg.p, &acfg)?;
    let histograms: Vec<Histogram> = match args.layer {
        Some(l) => {
            let picked: Vec<Histogram> = result
                .histograms
                .iter()
                .filter(|h| h.layer == l)
                .cloned()
                .collect();
            if picked.is_empty() {
                let have: Vec<usize> = result.histograms.iter().map(|h| h.layer).collect();
                return Err(Error::Usage(format!(
                    "layer {l} is not a spiking layer; histograms exist for layers {have:?}"
                )));
            }
            picked
        }
        None => result.histograms.clone(),
    };
    outln!(
        "accuracy={} mean_quant_error={} kl_estimate={} firing_rate={}",
        result.accuracy, result.mean_quant_error, result.kl_estimate, result.firing_rate
    );
    if let Some(out) = &args.out {
        let doc = serde_json::json!({
            "accuracy": result.accuracy,
            "mean_quant_error": result.mean_quant_error,
            "kl_estimate": result.kl_estimate,
            "firing_rate": result.firing_rate,
            "histograms": histograms_json(&histograms),
        });
        write_json(out, &doc)?;
        outln!("analysis={}", out.display());
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let (train, test) = synth_blobs(
        args.seed,
        args.classes,
        args.dim,
        args.train_per_class,
        args.test_per_class,
        args.spread,
    )?;
    std::fs::create_dir_all(&args.out_dir)?;
    match args.format.as_str() {
        "csv" => {
            for (name, ds) in [("train.csv", &train), ("test.csv", &test)] {
                let path = args.out_dir.join(name);
                write_csv(&path, ds)?;
                outln!("wrote={}", path.display());
            }
        }
        "idx" => {
            let side = (args.dim as f64).sqrt().round() as usize;
            if side * side != args.dim {
                return Err(Error::Usage(format!(
                    "idx output stores square images; {} features is not a perfect square",
                    args.dim
                )));
            }
            let (train, test) = to_unit_images(train, test, side)?;
            for (images, labels, ds) in [
                ("train-images.idx", "train-labels.idx", &train),
                ("test-images.idx", "test-labels.idx", &test),
            ] {
                let ip = args.out_dir.join(images);
                let lp = args.out_dir.join(labels);
                write_idx(&ip, &lp, ds)?;
                outln!("wrote={}", ip.display());
                outln!("wrote={}", lp.display());
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown format {other:?}, expected csv or idx"
            )))
        }
    }
    Ok(())
}

/// Rescales both splits to [0, 1] with one shared affine map and reshapes
/// the flat samples into single-channel square images. The shared map keeps
/// train and test comparable after the byte quantization of the idx format.
fn to_unit_images(mut train: Dataset, mut test: Dataset, side: usize) -> Result<(Dataset, Dataset)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in train.inputs.data().iter().chain(test.inputs.data()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for ds in [&mut train, &mut test] {
        let n = ds.len();
        ds.inputs = ds
            .inputs
            .map(|v| (v - lo) / span)
            .reshape(&[n, 1, side, side])?;
    }
    Ok((train, test))
}
