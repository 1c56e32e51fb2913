//! The `firedet` command line: dataset preparation, training, evaluation,
//! detection and benchmarking.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 validation findings,
//! 3 numeric divergence.

mod config;
mod overlay;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{Resolver, KNOWN_KEYS};
pub use overlay::{overlay_svg, to_bmp};

use crate::dataset::{
    dataset_dirs, generate_synthetic, load_dataset, split, stretch_resize, write_dataset,
    AnnotatedImage, DatasetSplit, RgbImage,
};
use crate::detector::{build_model, DetectorModel, ModelConfig, Preset};
use crate::error::{Error, Result};
use crate::inference::{self, evaluate_model, InferenceConfig, SequenceResult};
use crate::metrics::{compare_models, emit_curves, EvaluationReport};
use crate::training::{self, LossConfig, OptimizerConfig, Reduction, TrainSettings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FINDINGS: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Parser, Debug)]
#[command(
    name = "firedet",
    version,
    about = "Single-stage fire detector: data, training, evaluation, detection"
)]
pub struct Cli {
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate, split or synthesize a dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
    /// Train a detector; writes checkpoints and per-epoch history.
    Train(TrainArgs),
    /// Score one or more checkpoints and write curves and reports.
    Eval(EvalArgs),
    /// Run a checkpoint over an image or a directory of frames.
    Detect(DetectArgs),
    /// Time inference on synthetic frames.
    Bench(BenchArgs),
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Report images lacking usable annotations.
    Validate {
        /// Root holding `images/` and `labels/`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a reproducible train/val manifest.
    Split {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Generate a synthetic fire-blob dataset.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Size preset: n, s, m, l or x.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub depth_multiple: Option<f64>,
    #[arg(long)]
    pub width_multiple: Option<f64>,
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Comma-separated class names.
    #[arg(long)]
    pub classes: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Root holding `images/` and `labels/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split manifest (`train <file>` / `val <file>` lines).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Generate this many synthetic images instead of reading `--data`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Fraction of images assigned to training.
    #[arg(long)]
    pub ratio: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct InferArgs {
    /// Confidence threshold.
    #[arg(long)]
    pub conf: Option<f64>,
    /// NMS IoU threshold.
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub max_det: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decay the rate linearly to this fraction by the last epoch.
    #[arg(long)]
    pub lr_final_fraction: Option<f64>,
    /// Loss reduction: none, mean or sum.
    #[arg(long)]
    pub reduction: Option<String>,
    /// One value, or one per class, comma-separated.
    #[arg(long)]
    pub pos_weight: Option<String>,
    #[arg(long)]
    pub sample_weight: Option<f64>,
    #[arg(long)]
    pub lambda_obj: Option<f64>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    pub lambda_box: Option<f64>,
    #[arg(long)]
    pub anchor_ratio_threshold: Option<f64>,
    /// Seed for weight initialisation; defaults to `--seed`.
    #[arg(long)]
    pub weight_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate several checkpoints on the same data and tabulate them.
    #[arg(long, num_args = 1..)]
    pub compare: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Manifest subset to score: train, val or all.
    #[arg(long)]
    pub set: Option<String>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[command(flatten)]
    pub infer: InferArgs,
}

#[derive(Args, Debug, Default)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A PPM image or a directory of frames.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub infer: InferArgs,
    /// Also write an SVG per frame with the boxes drawn over the image.
    #[arg(long)]
    pub overlay: bool,
    #[arg(long)]
    pub classes: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct BenchArgs {
    /// Trained model; an untrained preset model is timed when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Size preset: n, s, m, l or x.
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub infer: InferArgs,
}

/// What a command reports back besides success.
enum Outcome {
    Done,
    Findings,
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    quiet: bool,
    resolver: Resolver,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn echo(&self, command: &str) -> Result<()> {
        self.write(RESOLVED_CONFIG, &self.resolver.echo(command))
            .map(|_| ())
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::Findings) => EXIT_FINDINGS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => EXIT_DIVERGED,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    let mut resolver = Resolver::load(cli.config.as_deref())?;
    let out: String = resolver.value(
        "out",
        cli.out.map(|p| p.display().to_string()),
        "firedet-out".into(),
    )?;
    let seed = resolver.value("seed", cli.seed, 0u64)?;
    let quiet = resolver.flag("quiet", cli.quiet)?;
    let out = PathBuf::from(out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut ctx = Ctx {
        out,
        seed,
        quiet,
        resolver,
    };
    match cli.command {
        Command::Dataset { action } => match action {
            DatasetCommand::Validate { data } => cmd_validate(&mut ctx, data),
            DatasetCommand::Split { data, ratio } => cmd_split(&mut ctx, data, ratio),
            DatasetCommand::Synth { count, size } => cmd_synth(&mut ctx, count, size),
        },
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&mut ctx, a),
        Command::Detect(a) => cmd_detect(&mut ctx, a),
        Command::Bench(a) => cmd_bench(&mut ctx, a),
    }
}

fn path_key(r: &mut Resolver, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
    Ok(r.optional(key, flag.map(|p| p.display().to_string()))?
        .map(PathBuf::from))
}

fn required(key: &str, v: Option<PathBuf>) -> Result<PathBuf> {
    let p = v.ok_or_else(|| Error::config(key, "is required"))?;
    if !p.exists() {
        return Err(Error::io(
            &p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "path does not exist"),
        ));
    }
    Ok(p)
}

fn class_names(text: &str) -> Result<Vec<String>> {
    let names: Vec<String> = text
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::config("classes", "needs at least one name"));
    }
    Ok(names)
}

fn cmd_validate(ctx: &mut Ctx, data: Option<PathBuf>) -> Result<Outcome> {
    let data = path_key(&mut ctx.resolver, "data", data)?;
    ctx.echo("dataset validate")?;
    let root = required("data", data)?;
    let (img, lbl) = dataset_dirs(&root);
    let report = load_dataset(&img, &lbl)?;
    ctx.write("rejections.csv", &report.rejection_csv())?;
    ctx.say(format!(
        "scanned {} images: {} usable, {} rejected",
        report.scanned(),
        report.images.len(),
        report.rejections.len()
    ));
    for r in &report.rejections {
        ctx.say(format!("  {}: {}", r.file, r.reason));
    }
    Ok(if report.rejections.is_empty() {
        Outcome::Done
    } else {
        Outcome::Findings
    })
}

fn cmd_split(ctx: &mut Ctx, data: Option<PathBuf>, ratio: Option<f64>) -> Result<Outcome> {
    let data = path_key(&mut ctx.resolver, "data", data)?;
    let ratio = ctx.resolver.value("ratio", ratio, 0.5)?;
    ctx.echo("dataset split")?;
    let root = required("data", data)?;
    let (img, lbl) = dataset_dirs(&root);
    let report = load_dataset(&img, &lbl)?;
    if !report.rejections.is_empty() {
        ctx.write("rejections.csv", &report.rejection_csv())?;
    }
    let s = split(report.images, ratio, ctx.seed)?;
    ctx.write("split.txt", &s.manifest())?;
    ctx.say(format!(
        "train {} / val {} (seed {}, ratio {ratio})",
        s.train.len(),
        s.val.len(),
        ctx.seed
    ));
    Ok(Outcome::Done)
}

fn cmd_synth(ctx: &mut Ctx, count: Option<usize>, size: Option<usize>) -> Result<Outcome> {
    let count = ctx.resolver.value("count", count, 200usize)?;
    let size = ctx.resolver.value("size", size, 416usize)?;
    ctx.echo("dataset synth")?;
    let items = generate_synthetic(count, size, ctx.seed)?;
    write_dataset(&items, &ctx.out)?;
    ctx.say(format!(
        "wrote {count} synthetic {size}×{size} images to {}",
        ctx.out.display()
    ));
    Ok(Outcome::Done)
}

fn model_config(r: &mut Resolver, m: ModelArgs) -> Result<(ModelConfig, Vec<String>)> {
    let preset: Preset = r.value("preset", m.preset, "n".to_string())?.parse()?;
    let (d, w) = preset.multiples();
    let depth = r.value("depth_multiple", m.depth_multiple, d)?;
    let width = r.value("width_multiple", m.width_multiple, w)?;
    let size = r.value("input_size", m.input_size, 416usize)?;
    let names = class_names(&r.value("classes", m.classes, "fire".to_string())?)?;
    let cfg = ModelConfig::with_multiples(depth, width, names.len(), size);
    cfg.validate()?;
    Ok((cfg, names))
}

/// Loads or synthesizes data, stretched to `size`, and splits it.
fn prepare_split(ctx: &mut Ctx, data: DataArgs, size: usize) -> Result<DatasetSplit> {
    let root = path_key(&mut ctx.resolver, "data", data.data)?;
    let manifest = path_key(&mut ctx.resolver, "manifest", data.manifest)?;
    let synthetic = ctx.resolver.optional("synthetic", data.synthetic)?;
    let ratio = ctx.resolver.value("ratio", data.ratio, 0.5)?;
    let images = match (synthetic, root) {
        (Some(n), _) => generate_synthetic(n, size, ctx.seed)?,
        (None, Some(root)) => {
            let root = required("data", Some(root))?;
            let (img, lbl) = dataset_dirs(&root);
            let report = load_dataset(&img, &lbl)?;
            if !report.rejections.is_empty() {
                ctx.write("rejections.csv", &report.rejection_csv())?;
                ctx.say(format!(
                    "{} images rejected (see rejections.csv)",
                    report.rejections.len()
                ));
            }
            report
                .images
                .iter()
                .map(|i| stretch_resize(i, size))
                .collect::<Result<Vec<_>>>()?
        }
        (None, None) => return Err(Error::config("data", "give --data or --synthetic")),
    };
    match manifest {
        Some(m) => {
            let m = required("manifest", Some(m))?;
            let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
            DatasetSplit::from_manifest(&text, images)
        }
        None => split(images, ratio, ctx.seed),
    }
}

fn cmd_train(ctx: &mut Ctx, a: TrainArgs) -> Result<Outcome> {
    let (cfg, names) = model_config(&mut ctx.resolver, a.model)?;
    let r = &mut ctx.resolver;
    let epochs = r.value("epochs", a.epochs, 200usize)?;
    let batch = r.value("batch", a.batch, 64usize)?;
    let lr = r.value("lr", a.lr, 0.001)?;
    let final_frac = r.optional("lr_final_fraction", a.lr_final_fraction)?;
    let defaults = LossConfig::default();
    let reduction: Reduction = r
        .value("reduction", a.reduction, "mean".to_string())?
        .parse()?;
    let pos_weight = r
        .value("pos_weight", a.pos_weight, "1".to_string())?
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config("pos_weight", format!("bad value `{v}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = LossConfig {
        pos_weight,
        sample_weight: r.value("sample_weight", a.sample_weight, defaults.sample_weight)?,
        reduction,
        lambda_obj: r.value("lambda_obj", a.lambda_obj, defaults.lambda_obj)?,
        lambda_cls: r.value("lambda_cls", a.lambda_cls, defaults.lambda_cls)?,
        lambda_box: r.value("lambda_box", a.lambda_box, defaults.lambda_box)?,
        anchor_ratio_threshold: r.value(
            "anchor_ratio_threshold",
            a.anchor_ratio_threshold,
            defaults.anchor_ratio_threshold,
        )?,
    };
    let seed = ctx.seed;
    let weight_seed = ctx.resolver.value("weight_seed", a.weight_seed, seed)?;
    let data = prepare_split(ctx, a.data, cfg.input_size)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "split has {} train and {} val images",
            data.train.len(),
            data.val.len()
        )));
    }
    // the last batch may be partial, but a batch cannot exceed the set
    let batch = if batch > data.train.len() {
        ctx.say(format!(
            "batch {batch} exceeds {} training images; using {}",
            data.train.len(),
            data.train.len()
        ));
        data.train.len()
    } else {
        batch
    };
    ctx.resolver.value("batch", Some(batch), batch)?;
    ctx.echo("train")?;
    ctx.write("split.txt", &data.manifest())?;
    let optimizer = OptimizerConfig {
        learning_rate: lr,
        epochs,
        batch_size: batch,
        final_lr_fraction: final_frac,
    };
    let mut model = build_model::<f32>(&cfg, weight_seed)?;
    ctx.say(format!(
        "training {} classes ({}) at {}px: {} parameters, {} train / {} val images",
        names.len(),
        names.join(","),
        cfg.input_size,
        model.param_count(),
        data.train.len(),
        data.val.len()
    ));
    let settings = TrainSettings {
        optimizer,
        loss,
        seed,
        validation: InferenceConfig::validation(),
        out_dir: Some(ctx.out.clone()),
    };
    let quiet = ctx.quiet;
    let history = training::train(&mut model, &data.train, &data.val, &settings, |r| {
        if !quiet {
            println!(
                "epoch {:>3}  loss {:.4} (obj {:.4} cls {:.4} box {:.4})  val P {:.3} R {:.3} F1 {:.3} mAP@0.5 {:.3}  {:.1}s",
                r.epoch, r.loss_total, r.loss_obj, r.loss_cls, r.loss_box, r.val_precision, r.val_recall, r.val_f1, r.val_map50, r.epoch_seconds
            );
        }
    })?;
    if let Some(b) = history.best() {
        ctx.say(format!(
            "best epoch {} with val mAP@0.5 {:.4}",
            b.epoch, b.val_map50
        ));
    }
    Ok(Outcome::Done)
}

fn inference_config(
    r: &mut Resolver,
    a: InferArgs,
    defaults: InferenceConfig,
) -> Result<InferenceConfig> {
    let cfg = InferenceConfig {
        conf_threshold: r.value("conf", a.conf, defaults.conf_threshold)?,
        nms_iou_threshold: r.value("iou", a.iou, defaults.nms_iou_threshold)?,
        max_detections: r.value("max_det", a.max_det, defaults.max_detections)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<DetectorModel<f32>> {
    let p = required("checkpoint", Some(path.to_path_buf()))?;
    DetectorModel::load(&p)
}

fn cmd_eval(ctx: &mut Ctx, a: EvalArgs) -> Result<Outcome> {
    let r = &mut ctx.resolver;
    let checkpoint = path_key(r, "checkpoint", a.checkpoint)?;
    let mut checkpoints: Vec<PathBuf> = checkpoint.into_iter().collect();
    checkpoints.extend(a.compare.iter().cloned());
    if checkpoints.is_empty() {
        return Err(Error::config(
            "checkpoint",
            "give --checkpoint or --compare",
        ));
    }
    let size_given = r.is_explicit("input_size", &a.input_size);
    let classes_given = r.is_explicit("classes", &a.classes);
    let input_size = r.optional("input_size", a.input_size)?;
    let classes = r.optional("classes", a.classes)?;
    let set = r.value("set", a.set, "auto".to_string())?;
    let batch = r.value("batch", a.batch, 16usize)?;
    if batch == 0 {
        return Err(Error::config("batch", "must be at least 1"));
    }
    let infer = inference_config(r, a.infer, InferenceConfig::validation())?;
    let models = checkpoints
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>>>()?;
    let first = models[0].config().clone();
    for (m, p) in models.iter().zip(&checkpoints) {
        let c = m.config();
        if size_given && input_size != Some(c.input_size) {
            return Err(Error::config(
                "input_size",
                format!(
                    "{} was trained at {}, requested {}",
                    p.display(),
                    c.input_size,
                    input_size.unwrap_or(0)
                ),
            ));
        }
        if classes_given {
            let n = class_names(classes.as_deref().unwrap_or(""))?.len();
            if n != c.num_classes {
                return Err(Error::config(
                    "num_classes",
                    format!(
                        "{} has {} classes, requested {n}",
                        p.display(),
                        c.num_classes
                    ),
                ));
            }
        }
        if c.input_size != first.input_size {
            return Err(Error::config(
                "input_size",
                "compared checkpoints differ in input size",
            ));
        }
    }
    let has_manifest =
        a.data.manifest.is_some() || ctx.resolver.is_explicit("manifest", &None::<String>);
    let split = prepare_split(ctx, a.data, first.input_size)?;
    ctx.echo("eval")?;
    let images: Vec<AnnotatedImage> = match set.as_str() {
        "val" => split.val,
        "train" => split.train,
        "all" => split.train.into_iter().chain(split.val).collect(),
        "auto" if has_manifest => split.val,
        "auto" => split.train.into_iter().chain(split.val).collect(),
        other => {
            return Err(Error::config(
                "set",
                format!("expected train, val or all, got `{other}`"),
            ))
        }
    };
    if images.is_empty() {
        return Err(Error::EmptyDataset(
            "the evaluation set has no images".into(),
        ));
    }
    let mut reports: Vec<EvaluationReport> = Vec::new();
    for (model, path) in models.iter().zip(&checkpoints) {
        let id = path.display().to_string();
        let mut report = evaluate_model(model, &images, batch, &infer, &id)?;
        report.model_size_bytes = Some(fs::metadata(path).map_err(|e| Error::io(path, e))?.len());
        let dir = if checkpoints.len() == 1 {
            ctx.out.clone()
        } else {
            ctx.out.join(format!("model_{}", reports.len() + 1))
        };
        emit_curves(&report, &dir)?;
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(dir.join("report.json"), json).map_err(|e| Error::io(&dir, e))?;
        ctx.say(report.summary());
        reports.push(report);
    }
    if reports.len() > 1 {
        let table = compare_models(&reports)?;
        ctx.write("comparison.csv", &table.to_csv())?;
        ctx.write("comparison.txt", &table.to_text())?;
        ctx.say(table.to_text());
    }
    Ok(Outcome::Done)
}

fn cmd_detect(ctx: &mut Ctx, a: DetectArgs) -> Result<Outcome> {
    let r = &mut ctx.resolver;
    let checkpoint = path_key(r, "checkpoint", a.checkpoint)?;
    let input = path_key(r, "input", a.input)?;
    let infer = inference_config(r, a.infer, InferenceConfig::default())?;
    let overlay = r.flag("overlay", a.overlay)?;
    let names = class_names(&r.value("classes", a.classes, "fire".to_string())?)?;
    ctx.echo("detect")?;
    let model = load_model(&required("checkpoint", checkpoint)?)?;
    let input = required("input", input)?;
    let result = if input.is_dir() {
        inference::detect_sequence(&model, &input, &infer)?
    } else {
        let name = input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match RgbImage::read_ppm(&input) {
            Ok(img) => {
                let (detections, latency_s) = inference::detect_image(&model, &img, &infer)?;
                SequenceResult {
                    frames: vec![inference::FrameResult {
                        frame: name,
                        detections,
                        latency_s,
                    }],
                    skipped: Vec::new(),
                    summary: inference::TimingSummary::from_latencies(&[latency_s]),
                }
            }
            Err(e) => SequenceResult {
                frames: Vec::new(),
                skipped: vec![(name, e.to_string())],
                summary: inference::TimingSummary::from_latencies(&[]),
            },
        }
    };
    for (f, why) in &result.skipped {
        eprintln!("skipped {f}: {why}");
    }
    if result.frames.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no readable frames in {}",
            input.display()
        )));
    }
    ctx.write("detections.csv", &result.detections_csv())?;
    ctx.write("timing.csv", &result.summary.to_csv())?;
    if overlay {
        for f in &result.frames {
            let src = if input.is_dir() {
                input.join(&f.frame)
            } else {
                input.clone()
            };
            let img = RgbImage::read_ppm(&src)?;
            let stem = Path::new(&f.frame)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            ctx.write(
                &format!("overlays/{stem}.svg"),
                &overlay_svg(&img, &f.detections, &names),
            )?;
        }
    }
    let n: usize = result.frames.iter().map(|f| f.detections.len()).sum();
    let s = &result.summary;
    ctx.say(format!(
        "{} frames, {n} detections; mean {:.4}s median {:.4}s max {:.4}s ({:.2} fps)",
        s.frames, s.mean_s, s.median_s, s.max_s, s.fps
    ));
    Ok(Outcome::Done)
}

fn cmd_bench(ctx: &mut Ctx, a: BenchArgs) -> Result<Outcome> {
    let r = &mut ctx.resolver;
    let checkpoint = path_key(r, "checkpoint", a.checkpoint)?;
    let frames = r.value("frames", a.frames, 20usize)?;
    let size = r.value("size", a.size, 416usize)?;
    let infer = inference_config(r, a.infer, InferenceConfig::default())?;
    let model = match checkpoint {
        Some(p) => load_model(&p)?,
        None => {
            let preset: Preset = r.value("preset", a.preset, "n".to_string())?.parse()?;
            build_model(&ModelConfig::from_preset(preset, 1, size), ctx.seed)?
        }
    };
    ctx.echo("bench")?;
    if frames == 0 {
        return Err(Error::config("frames", "must be at least 1"));
    }
    let (summary, dets) = inference::bench(&model, frames, size, ctx.seed, &infer)?;
    ctx.write("bench_timing.csv", &summary.to_csv())?;
    let n: usize = dets.iter().map(Vec::len).sum();
    ctx.say(format!(
        "{} frames at {size}×{size} (model input {}): mean {:.4}s median {:.4}s max {:.4}s, {:.2} fps, {n} detections",
        summary.frames,
        model.config().input_size,
        summary.mean_s,
        summary.median_s,
        summary.max_s,
        summary.fps
    ));
    Ok(Outcome::Done)
}
