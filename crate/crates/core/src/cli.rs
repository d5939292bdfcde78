//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::RunConfigFile;
use crate::data::{
    encode_rgb_png, generate_scenes, import_dataset, load_dataset, Dataset, Domain, IdMapping,
    SceneGenConfig, CLASS_NAMES,
};
use crate::error::{Error, Result};
use crate::gradcheck::{parse_fault, standard_suite, FAULT_NAMES};
use crate::metrics::evaluate_branch;
use crate::model::Branch;
use crate::pseudolabel::{label_dataset, LabelSummary, PseudoLabelConfig};
use crate::trainer::{self, load_model, save_label_masks, save_model, RunLog, RunOptions, TrainData, UpdateMode};

#[derive(Debug, Parser)]
#[command(name = "fctn", version, about = "Tri-branch domain adaptation for semantic segmentation")]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic source / target-train / target-val sets.
    GenerateData(GenerateArgs),
    /// Train base and all branches on the source set only.
    Pretrain(TrainArgs),
    /// Pretraining followed by the pseudo-labeling rounds.
    Adapt(AdaptArgs),
    /// Write pseudo-label masks of a checkpoint for a dataset.
    Label(LabelArgs),
    /// Per-class IoU and mIoU of a checkpoint on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every op and loss term.
    Gradcheck(GradcheckArgs),
    /// Convert an external dataset (RGB images + id masks) to the native layout.
    ImportData(ImportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Config file; its [scenes] table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives source/, target_train/ and target_val/.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Images in each of source/ and target_train/.
    #[arg(long)]
    pub count: Option<usize>,
    /// Images in target_val/.
    #[arg(long, default_value_t = 50)]
    pub val_count: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    /// TOML run configuration (flags override its values).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run name; outputs go to <out-dir>/<tag>-s<seed>.
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Labeled source dataset directory.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Unlabeled target training dataset directory.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Labeled target validation dataset directory.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Weight of the weight-divergence term.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the pseudo-label term.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub pretrain_iters: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub steps_per_round: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Steps between rolling checkpoints (0 = phase ends only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// joint (one combined step) or sequential (source step, then target step).
    #[arg(long, value_parser = parse_update_mode)]
    pub update_mode: Option<UpdateMode>,
}

fn parse_update_mode(s: &str) -> std::result::Result<UpdateMode, String> {
    match s {
        "joint" => Ok(UpdateMode::Joint),
        "sequential" => Ok(UpdateMode::Sequential),
        _ => Err(format!("expected `joint` or `sequential`, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Continue the run from <run dir>/latest.ckpt.
    #[arg(long)]
    pub resume: bool,
    /// Start from a pretrained checkpoint and skip pretraining.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Stop after this many training steps in total, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to label (masks, if any, are not read).
    #[arg(long)]
    pub data: PathBuf,
    /// Receives masks/ (ids, 255 = unlabeled), color/ and summary.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::pseudolabel::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Branch to evaluate: ft, f1 or f2.
    #[arg(long, default_value = "ft")]
    pub branch: Branch,
    /// Also write machine-readable metric lines here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt this op's backward rule; the run must then fail.
    #[arg(long, value_parser = FAULT_NAMES)]
    pub negative_control: Option<String>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Directory with manifest.txt listing `image [mask]` pairs.
    #[arg(long)]
    pub src: PathBuf,
    /// `external_id train_id` table; unlisted ids become 255.
    #[arg(long)]
    pub mapping: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "source")]
    pub domain: Domain,
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 2,
        Error::Io { .. } | Error::Dataset(_) | Error::Checkpoint(_) | Error::ParamShape { .. } => 3,
        Error::Diverged(_) | Error::NoCoverage(_) => 4,
        _ => 1,
    }
}

pub fn init_logging(quiet: bool) {
    let level = if quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Runs a parsed command; `Ok(false)` means it completed but reports
/// failure (a failing gradient check).
pub fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData(a) => generate(a).map(|_| true),
        Command::Pretrain(a) => pretrain(a).map(|_| true),
        Command::Adapt(a) => adapt(a).map(|_| true),
        Command::Label(a) => label(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ImportData(a) => import(a).map(|_| true),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfigFile::load(p)?.scenes,
        None => SceneGenConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = a.classes {
        cfg.num_classes = v;
    }
    cfg.validate()?;
    let splits = [
        ("source", Domain::Source, cfg.count, 0u64, true),
        ("target_train", Domain::Target, cfg.count, 1, false),
        ("target_val", Domain::Target, a.val_count, 2, true),
    ];
    for (name, domain, count, salt, masks) in splits {
        let c = SceneGenConfig {
            seed: cfg.seed.wrapping_mul(3).wrapping_add(salt),
            count,
            ..cfg.clone()
        };
        let dir = a.out.join(name);
        generate_scenes(&c, domain, &dir, masks)?;
        info!("wrote {count} {domain} images to {}", dir.display());
    }
    let path = a.out.join("scenes.toml");
    fs::write(&path, toml::to_string_pretty(&cfg).expect("config serializes"))
        .map_err(|e| Error::io(&path, e))
}

/// Config file, then flags.
pub fn resolve_config(a: &TrainArgs) -> Result<RunConfigFile> {
    let mut c = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.tag, c.tag);
    set!(a.out_dir, c.out_dir);
    set!(a.seed, c.train.seed);
    set!(a.alpha, c.train.alpha);
    set!(a.beta, c.train.beta);
    set!(a.lr, c.train.learning_rate);
    set!(a.pretrain_iters, c.train.pretrain_iters);
    set!(a.rounds, c.train.rounds);
    set!(a.steps_per_round, c.train.steps_per_round);
    set!(a.batch_size, c.train.batch_size);
    set!(a.threshold, c.train.threshold);
    set!(a.checkpoint_every, c.train.checkpoint_every);
    set!(a.update_mode, c.train.update_mode);
    if a.source.is_some() {
        c.data.source = a.source.clone();
    }
    if a.target.is_some() {
        c.data.target = a.target.clone();
    }
    if a.val.is_some() {
        c.data.val = a.val.clone();
    }
    c.validate()?;
    Ok(c)
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path
        .clone()
        .ok_or_else(|| Error::Config(format!("no {what} dataset given (flag --{what} or [data] {what})")))?;
    if !p.exists() {
        return Err(Error::Dataset(format!("{what} dataset {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_checked(path: &Path, classes: usize) -> Result<Dataset> {
    let d = load_dataset(path)?;
    for (i, m) in d.masks.iter().enumerate() {
        if let Some(m) = m {
            if let Some(&bad) = m.iter().find(|&&y| y != crate::IGNORE_ID && y as usize >= classes) {
                return Err(Error::Dataset(format!(
                    "{}: sample {i} has label {bad}, model has {classes} classes",
                    path.display()
                )));
            }
        }
    }
    Ok(d)
}

fn pretrain(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let classes = cfg.arch.num_classes;
    let source = load_checked(&require(&cfg.data.source, "source")?, classes)?;
    let masks = source.labeled_masks()?;
    let run_dir = cfg.run_dir();
    cfg.write_resolved(&run_dir)?;
    let mut log = RunLog::attach(run_dir.join(trainer::LOG_FILE))?;
    let mut model = crate::model::FctnModel::new(cfg.arch.clone(), cfg.train.seed)?;
    trainer::pretrain(
        &mut model,
        &source.images,
        &masks,
        &cfg.train,
        cfg.train.pretrain_iters,
        &mut log,
    )?;
    let ckpt = run_dir.join("pretrain.ckpt");
    save_model(&model, None, &ckpt)?;
    info!("saved {}", ckpt.display());
    if let Some(v) = &cfg.data.val {
        let val = load_checked(v, classes)?;
        let vm = val.labeled_masks()?;
        let report = evaluate_branch(&model, Branch::Ft, &val.images, &vm)?.iou_report();
        let names = class_names(classes);
        println!("{}", report.table(&names, "validation after pretraining (Ft)"));
        let path = run_dir.join(trainer::METRICS_FILE);
        fs::write(&path, report.metric_lines("pretrain", &names)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = resolve_config(&a.train)?;
    let classes = cfg.arch.num_classes;
    let source = load_checked(&require(&cfg.data.source, "source")?, classes)?;
    let target = load_dataset(require(&cfg.data.target, "target")?)?;
    let val = match &cfg.data.val {
        Some(v) => Some(load_checked(v, classes)?),
        None => None,
    };
    let source_masks = source.labeled_masks()?;
    let val_masks = val.as_ref().map(Dataset::labeled_masks).transpose()?;
    let data = TrainData {
        source_images: &source.images,
        source_masks: &source_masks,
        target_images: &target.images,
        val: val.as_ref().zip(val_masks.as_deref()).map(|(v, m)| (v.images.as_slice(), m)),
    };
    let run_dir = cfg.run_dir();
    cfg.write_resolved(&run_dir)?;
    let opts = RunOptions {
        stop_after: a.stop_after,
        resume: a.resume,
        init: a.init.clone(),
    };
    let outcome = trainer::run(&cfg.train, &cfg.arch, data, &run_dir, &opts)?;
    if !outcome.finished {
        println!(
            "stopped after {} steps; continue with --resume",
            outcome.state.global_step
        );
        return Ok(());
    }
    let names = class_names(classes);
    for e in &outcome.state.evals {
        let title = if e.round == 0 {
            "validation after pretraining (Ft)".to_string()
        } else {
            format!("validation after round {} (Ft)", e.round)
        };
        println!("{}", e.report.table(&names, &title));
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn class_names(classes: usize) -> Vec<&'static str> {
    (0..classes)
        .map(|c| CLASS_NAMES.get(c).copied().unwrap_or("class"))
        .collect()
}

const PALETTE: [[u8; 3]; 8] = [
    [70, 130, 180],
    [70, 70, 70],
    [128, 64, 128],
    [244, 35, 232],
    [107, 142, 35],
    [0, 0, 142],
    [153, 153, 153],
    [220, 220, 0],
];

fn colorize(mask: &[u8]) -> Vec<u8> {
    mask.iter()
        .flat_map(|&y| {
            if y == crate::IGNORE_ID {
                [0, 0, 0]
            } else {
                PALETTE.get(y as usize).copied().unwrap_or([255, 255, 255])
            }
        })
        .collect()
}

fn label(a: LabelArgs) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let cfg = PseudoLabelConfig {
        confidence_threshold: a.threshold,
    };
    let (samples, summary) = label_dataset(&model, &data.images, &cfg)?;
    save_label_masks(a.out.join("masks"), &samples)?;
    let color = a.out.join("color");
    fs::create_dir_all(&color).map_err(|e| Error::io(&color, e))?;
    for s in &samples {
        let path = color.join(format!("{:05}.png", s.index));
        fs::write(&path, encode_rgb_png(s.width, s.height, &colorize(&s.mask))?)
            .map_err(|e| Error::io(&path, e))?;
    }
    let text = summary_text(&summary, &class_names(model.num_classes()), a.threshold);
    print!("{text}");
    let path = a.out.join("summary.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn summary_text(s: &LabelSummary, names: &[&str], threshold: f64) -> String {
    let mut t = format!(
        "threshold {threshold}\nlabeled_pixels {}\ntotal_pixels {}\ncoverage {:.6}\n",
        s.labeled_pixels,
        s.total_pixels,
        s.labeled_pixels as f64 / s.total_pixels.max(1) as f64
    );
    for (c, n) in s.per_class.iter().enumerate() {
        t.push_str(&format!("class.{} {n}\n", names.get(c).copied().unwrap_or("class")));
    }
    t
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let data = load_checked(&a.data, model.num_classes())?;
    let masks = data.labeled_masks()?;
    let report = evaluate_branch(&model, a.branch, &data.images, &masks)?.iou_report();
    let names = class_names(model.num_classes());
    println!(
        "{}",
        report.table(&names, &format!("{} on {}", a.branch, a.data.display()))
    );
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(out, report.metric_lines("eval", &names)).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let fault = a.negative_control.as_deref().map(parse_fault).transpose()?;
    let start = std::time::Instant::now();
    let reports = standard_suite(a.seed, fault)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{} {:<40} max rel err {:.2e}",
            if r.passed() { "ok  " } else { "FAIL" },
            r.label,
            r.max_rel_error()
        );
        if !r.passed() {
            ok = false;
            for p in r.failures() {
                println!(
                    "     {}: entry {} analytic {:.6e} numeric {:.6e}",
                    p.name, p.worst_index, p.analytic, p.numeric
                );
            }
        }
    }
    println!(
        "{} checks, {} failed, {:.1}s",
        reports.len(),
        reports.iter().filter(|r| !r.passed()).count(),
        start.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn import(a: ImportArgs) -> Result<()> {
    let mapping = IdMapping::from_file(&a.mapping)?;
    let n = import_dataset(&a.src, &mapping, &a.out, a.domain)?;
    info!("imported {n} images to {}", a.out.display());
    Ok(())
}
