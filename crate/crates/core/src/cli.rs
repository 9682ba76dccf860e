//! The `fer` command line: `stats`, `weights`, `synth`, `train`, `eval`, `predict`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::augment::{build_eval_pipeline, EvalPipeline, Image, ImageTensorSpec, Transform};
use crate::config::{read_manifest, RunConfig};
use crate::dataset::{
    compute_class_weights, compute_distribution, generate_synthetic_dataset, ExpressionLabel,
    Split, SynthSpec, CLASS_NAMES, NUM_CLASSES,
};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{emit_report, write_predictions, ReportFormat};
use crate::nn::{load_checkpoint, load_params, read_param_set, reshape_head, Network};
use crate::train::{
    argmax, evaluate, probabilities, read_meta, resolve_class_weights, run_training, stack,
    ImageSet, TrainingRun, WEIGHTS_FILE,
};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Parser)]
#[command(
    name = "fer",
    version,
    about = "Seven-class facial expression recognition"
)]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for data loading and batch computation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-class sample counts of the configured splits.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// Inverse-frequency class weights of the training split.
    Weights,
    /// Generate a class-separable synthetic dataset and a matching desk config.
    Synth(SynthArgs),
    /// Fine-tune the configured network.
    Train {
        /// Continue from the saved training state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled manifest; defaults to the configured validation split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
    },
    /// Classify one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Training images per class.
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    /// Validation images per class.
    #[arg(long, default_value_t = 10)]
    pub val_per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Table,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Table => ReportFormat::Table,
        }
    }
}

/// Loads `--config` (or the defaults) and applies the command-line overrides.
fn run_config(cli: &Cli, required: bool) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None if required => return Err(Error::Config("this command needs --config".into())),
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("serializable"),
    )
    .at(path)
}

fn format_vector(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        // A global pool can be installed only once per process; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match &cli.command {
        Command::Stats { json } => {
            let config = run_config(cli, true)?;
            let mut report = serde_json::Map::new();
            for split in [Split::Train, Split::Val] {
                if config.sources(split).is_empty() {
                    continue;
                }
                let dist = compute_distribution(&config.load_split(split)?);
                if *json {
                    let counts: serde_json::Map<_, _> = CLASS_NAMES
                        .iter()
                        .zip(dist.counts())
                        .map(|(n, c)| (n.to_string(), (*c).into()))
                        .collect();
                    report.insert(
                        split.to_string(),
                        serde_json::json!({"counts": counts, "total": dist.total()}),
                    );
                } else {
                    writeln!(out, "{split}").map_err(io)?;
                    for (name, count) in CLASS_NAMES.iter().zip(dist.counts()) {
                        writeln!(out, "  {name:<10} {count:>9}").map_err(io)?;
                    }
                    writeln!(out, "  {:<10} {:>9}", "total", dist.total()).map_err(io)?;
                }
            }
            if *json {
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string_pretty(&report).expect("json")
                )
                .map_err(io)?;
            }
        }
        Command::Weights => {
            let config = run_config(cli, true)?;
            let dist = compute_distribution(&config.load_split(Split::Train)?);
            let weights = compute_class_weights(&dist)?;
            let record = weights.to_record();
            writeln!(out, "classes:   {}", CLASS_NAMES.join(", ")).map_err(io)?;
            writeln!(out, "exact:     {}", format_vector(&record.full_precision)).map_err(io)?;
            let rounded: Vec<String> = record.rounded.iter().map(|v| format!("{v:.2}")).collect();
            writeln!(out, "rounded:   {}", rounded.join(", ")).map_err(io)?;
            let path = config.resolved_output_dir().join(WEIGHTS_FILE);
            write_json(&path, &record)?;
            writeln!(out, "written:   {}", path.display()).map_err(io)?;
        }
        Command::Synth(args) => {
            let dir = match &cli.out {
                Some(d) => d.clone(),
                None => return Err(Error::Config("synth needs --out DIR".into())),
            };
            let seed = cli.seed.unwrap_or(0);
            if args.per_class == 0 || args.val_per_class == 0 {
                return Err(Error::Config(
                    "--per-class and --val-per-class must be positive".into(),
                ));
            }
            let mut desk = RunConfig::desk(dir.join("train.csv"), dir.join("val.csv"));
            desk.seed = seed;
            desk.network.input = ImageTensorSpec::square(args.size);
            desk.output_dir = dir.join("run");
            desk.validate()?;
            for (split, n) in [
                (Split::Train, args.per_class),
                (Split::Val, args.val_per_class),
            ] {
                let spec = SynthSpec {
                    counts: [n; NUM_CLASSES],
                    image_size: args.size,
                    seed,
                };
                let manifest = generate_synthetic_dataset(&spec, split, &dir)?;
                writeln!(out, "{split}: {} images", manifest.len()).map_err(io)?;
            }
            let path = dir.join(RUN_CONFIG_FILE);
            fs::write(&path, desk.to_json()).at(&path)?;
            writeln!(out, "config: {}", path.display()).map_err(io)?;
        }
        Command::Train { resume } => train(cli, *resume, out)?,
        Command::Eval {
            checkpoint,
            manifest,
            format,
        } => {
            let config = run_config(cli, false)?;
            let network = load_checkpoint::<f32>(checkpoint)?;
            let manifest = match manifest {
                Some(path) => read_manifest(path, Split::Val)?,
                None => config.load_split(Split::Val)?,
            };
            if manifest.is_empty() {
                return Err(Error::Domain(
                    "cannot evaluate on a manifest with zero samples".into(),
                ));
            }
            let data = ImageSet::<f32>::new(manifest, "", true)?;
            let pipeline = build_eval_pipeline(config.normalization, network.config().input)?;
            let eval = evaluate(&network, &data, &pipeline, config.train.eval_batch_size)?;
            let dir = match &cli.out {
                Some(d) => d.clone(),
                None => checkpoint
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_default(),
            };
            fs::create_dir_all(&dir).at(&dir)?;
            let report_path = dir.join("eval_report.json");
            fs::write(&report_path, emit_report(&eval.report, ReportFormat::Json))
                .at(&report_path)?;
            write_predictions(&eval.predictions, &dir.join("predictions.csv"))?;
            write!(out, "{}", emit_report(&eval.report, (*format).into())).map_err(io)?;
        }
        Command::Predict {
            checkpoint,
            image,
            json,
        } => {
            let config = run_config(cli, false)?;
            let network = load_checkpoint::<f32>(checkpoint)?;
            let pipeline = build_eval_pipeline(config.normalization, network.config().input)?;
            let (label, probs) = predict(&network, &pipeline, image)?;
            if *json {
                let probs: serde_json::Map<_, _> = CLASS_NAMES
                    .iter()
                    .zip(&probs)
                    .map(|(n, p)| (n.to_string(), serde_json::json!(p)))
                    .collect();
                let doc = serde_json::json!({"label": label.name(), "code": label.code(), "probabilities": probs});
                writeln!(out, "{doc}").map_err(io)?;
            } else {
                writeln!(out, "{} {}", label.name(), label.code()).map_err(io)?;
                for (name, p) in CLASS_NAMES.iter().zip(&probs) {
                    writeln!(out, "  {name:<10} {p:.6}").map_err(io)?;
                }
            }
        }
    }
    Ok(())
}

/// Predicted label and class probabilities for one image file.
pub fn predict(
    network: &Network<f32>,
    pipeline: &EvalPipeline,
    image: &Path,
) -> Result<(ExpressionLabel, [f64; NUM_CLASSES])> {
    let img = Image::<f32>::open(image)?;
    let x = stack(&[pipeline.apply(&img, 0)?])?;
    let logits = network.infer(&x)?;
    let p = probabilities(&logits.cast::<f64>())[0];
    Ok((ExpressionLabel::from_index(argmax(&p))?, p))
}

fn train(cli: &Cli, resume: bool, out: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    let config = run_config(cli, true)?;
    let train_cfg = config.train_config();
    let train_manifest = config.load_split(Split::Train)?;
    let val_manifest = config.load_split(Split::Val)?;
    if val_manifest.is_empty() {
        return Err(Error::Config("validation manifest has no samples".into()));
    }
    resolve_class_weights(&train_cfg.class_weights, &train_manifest)?;

    let mut network = Network::<f32>::new(config.network.clone(), config.seed)?;
    let mut load_report = None;
    if let Some(pre) = &config.pretrained {
        let set = reshape_head(
            read_param_set(&pre.path)?,
            NUM_CLASSES,
            pre.preserve_head,
            config.seed,
        )?;
        load_report = Some(load_params(&mut network, &set, pre.strict)?);
    }
    let out_dir = config.resolved_output_dir();
    fs::create_dir_all(&out_dir).at(&out_dir)?;
    let archived = out_dir.join(RUN_CONFIG_FILE);
    fs::write(&archived, config.to_json()).at(&archived)?;
    if let Some(report) = &load_report {
        write_json(&out_dir.join("load_report.json"), report)?;
        writeln!(
            out,
            "pretrained: {} matched, {} missing, {} unexpected",
            report.matched.len(),
            report.missing.len(),
            report.unexpected.len()
        )
        .map_err(io)?;
    }

    let train_set = ImageSet::<f32>::new(train_manifest, "", train_cfg.preload_images)?;
    let val_set = ImageSet::<f32>::new(val_manifest, "", train_cfg.preload_images)?;
    let run = TrainingRun {
        config: &train_cfg,
        jitter: &config.augmentation,
        normalization: config.normalization,
        out_dir: &out_dir,
        config_hash: config.hash(),
        resume,
    };
    let outcome = run_training(&run, &train_set, &val_set, &mut network)
        .map_err(|e| context(e, &format!("training in {}", out_dir.display())))?;

    let best = load_checkpoint::<f32>(&outcome.best_checkpoint)?;
    let pipeline = build_eval_pipeline(config.normalization, best.config().input)?;
    let eval = evaluate(&best, &val_set, &pipeline, train_cfg.eval_batch_size)?;
    let report_path = out_dir.join("final_report.json");
    fs::write(&report_path, emit_report(&eval.report, ReportFormat::Json)).at(&report_path)?;
    let meta = read_meta(&outcome.best_checkpoint)?;
    writeln!(
        out,
        "stopped at iteration {} ({:?}); best iteration {} criterion {:.4}",
        outcome.final_iteration, outcome.stop, meta.iteration, meta.expression_criterion
    )
    .map_err(io)?;
    writeln!(
        out,
        "best checkpoint: {}",
        outcome.best_checkpoint.display()
    )
    .map_err(io)?;
    write!(out, "{}", emit_report(&eval.report, ReportFormat::Table)).map_err(io)?;
    Ok(())
}

/// Prefixes an error message with what was being done, keeping its kind.
fn context(err: Error, what: &str) -> Error {
    match err {
        Error::Training(m) => Error::Training(format!("{what}: {m}")),
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        Error::Load(m) => Error::Load(format!("{what}: {m}")),
        other => other,
    }
}
