//! Pretraining on the source set, then rounds of pseudo-labeling the target
//! set and re-training on half source / half pseudo-labeled minibatches.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{sample_minibatch, EpochSampler, SamplerState};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{self, BatchRef, ClassWeights, LossBundle, LossWeights};
use crate::metrics::{evaluate_branch, IouReport};
use crate::model::{ArchSpec, Branch, FctnModel};
use crate::nn::{load_checkpoint, save_checkpoint, SgdOptimizer};
use crate::pseudolabel::{label_dataset, LabelSummary, PseudoLabelConfig, PseudoLabeledSample};
use crate::tensor::Tensor;

/// One combined SGD step per iteration, or the two sub-updates of the
/// original schedule (source terms, then pseudo-label terms).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    #[default]
    Joint,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    /// Full-scale reference: 70k pretraining iterations.
    pub pretrain_iters: usize,
    pub rounds: usize,
    /// Full-scale reference: 13k (round 1) / 20k (round 2).
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Steps between rolling checkpoints; 0 = only at phase ends.
    pub checkpoint_every: usize,
    pub update_mode: UpdateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1e3,
            beta: 100.0,
            learning_rate: 1e-5,
            pretrain_iters: 2000,
            rounds: 2,
            steps_per_round: 1000,
            batch_size: 4,
            threshold: 0.95,
            seed: 0,
            checkpoint_every: 500,
            update_mode: UpdateMode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.steps_per_round == 0 || self.pretrain_iters == 0 {
            return bad("iteration counts must be positive".into());
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!(
                "batch size must be even and >= 2 (half source, half target), got {}",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.beta >= 0.0) {
            return bad("alpha/beta must be finite, beta non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "round")]
pub enum Phase {
    Pretrain,
    Round(usize),
    Done,
}

/// Validation result recorded after pretraining (`round` 0) and each round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: usize,
    pub report: IouReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub round: usize,
    pub summary: LabelSummary,
}

/// Everything needed to continue a run from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub phase: Phase,
    /// Completed steps within the current phase.
    pub step: usize,
    pub global_step: usize,
    pub source_sampler: SamplerState,
    pub target_sampler: Option<SamplerState>,
    pub evals: Vec<EvalRecord>,
    pub labelings: Vec<LabelRecord>,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogEvent {
    Step {
        phase: Phase,
        step: usize,
        l_w: f64,
        l_s: f64,
        l_tl: Option<f64>,
        l_s_target_branch: Option<f64>,
        total: f64,
    },
    Labeling {
        round: usize,
        coverage: f64,
        labeled_pixels: u64,
        total_pixels: u64,
        per_class: Vec<u64>,
    },
    Eval {
        round: usize,
        iou: Vec<Option<f64>>,
        miou: Option<f64>,
    },
    Checkpoint {
        phase: Phase,
        step: usize,
        file: String,
    },
    Resumed {
        phase: Phase,
        step: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LogLine {
    /// Seconds since the run started (continues across resumes).
    t: f64,
    #[serde(flatten)]
    event: LogEvent,
}

/// Append-only event log, mirrored to a JSON-lines file when attached.
#[derive(Debug)]
pub struct RunLog {
    events: Vec<LogEvent>,
    file: Option<File>,
    start: Instant,
    offset: f64,
    last_t: f64,
}

impl Default for RunLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog {
            events: Vec::new(),
            file: None,
            start: Instant::now(),
            offset: 0.0,
            last_t: 0.0,
        }
    }

    /// Opens (or continues) a log file; existing events are read back.
    pub fn attach(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut log = Self::in_memory();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let l: LogLine = serde_json::from_str(&line)
                    .map_err(|e| Error::Dataset(format!("{}: bad log line: {e}", path.display())))?;
                log.offset = log.offset.max(l.t);
                log.events.push(l.event);
            }
            log.last_t = log.offset;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        log.file = Some(f);
        Ok(log)
    }

    pub fn push(&mut self, event: LogEvent) -> Result<()> {
        let t = (self.offset + self.start.elapsed().as_secs_f64()).max(self.last_t);
        self.last_t = t;
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&LogLine {
                t,
                event: event.clone(),
            })
            .expect("log events serialize");
            writeln!(f, "{line}").map_err(|e| Error::io("run log", e))?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    /// Total losses of every logged step, in order.
    pub fn losses(&self) -> Vec<(Phase, usize, f64)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Step {
                    phase, step, total, ..
                } => Some((*phase, *step, *total)),
                _ => None,
            })
            .collect()
    }
}

/// Training inputs. Target ground truth never enters here; validation
/// masks are only handed to the metrics.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub source_images: &'a [Tensor<f32>],
    pub source_masks: &'a [&'a [u8]],
    pub target_images: &'a [Tensor<f32>],
    pub val: Option<(&'a [Tensor<f32>], &'a [&'a [u8]])>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop (with a checkpoint) once this many steps have run in total.
    pub stop_after: Option<usize>,
    /// Continue from `<run_dir>/latest.ckpt`.
    pub resume: bool,
    /// Start from these weights and skip pretraining.
    pub init: Option<PathBuf>,
}

pub struct RunOutcome {
    pub model: FctnModel<f32>,
    pub state: TrainerState,
    pub log: RunLog,
    pub finished: bool,
}

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "run_log.jsonl";
pub const METRICS_FILE: &str = "metrics.txt";

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn target_sampler_seed(seed: u64, round: usize) -> u64 {
    mix(seed, 1000 + round as u64)
}

/// Saves parameters with the architecture (and optional trainer state).
pub fn save_model(
    model: &FctnModel<f32>,
    train: Option<(&TrainConfig, &TrainerState)>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut meta = json!({ "arch": model.spec() });
    if let Some((cfg, state)) = train {
        meta["train_config"] = serde_json::to_value(cfg).expect("config serializes");
        meta["trainer"] = serde_json::to_value(state).expect("state serializes");
    }
    save_checkpoint(&model.params, &meta, path)
}

/// Loads a model checkpoint; returns the trainer state when present.
pub fn load_model(path: impl AsRef<Path>) -> Result<(FctnModel<f32>, Option<TrainerState>)> {
    let path = path.as_ref();
    let ck = load_checkpoint::<f32>(path)?;
    let arch = ck
        .metadata
        .get("arch")
        .ok_or_else(|| Error::Checkpoint(format!("{}: no architecture in manifest", path.display())))?;
    let spec: ArchSpec = serde_json::from_value(arch.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad architecture: {e}", path.display())))?;
    let model = FctnModel::from_params(spec, ck.params)?;
    let state = match ck.metadata.get("trainer") {
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| Error::Checkpoint(format!("{}: bad trainer state: {e}", path.display())))?,
        ),
        None => None,
    };
    Ok((model, state))
}

/// Pseudo-label masks as gray PNGs, `<dir>/NNNNN.png`.
pub fn save_label_masks(dir: impl AsRef<Path>, samples: &[PseudoLabeledSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let path = dir.join(format!("{:05}.png", s.index));
        let bytes = crate::data::encode_gray_png(s.width, s.height, &s.mask)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn load_label_masks(dir: &Path, count: usize) -> Result<Vec<PseudoLabeledSample>> {
    (0..count)
        .map(|i| {
            let path = dir.join(format!("{i:05}.png"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (w, h, ch, mask) = crate::data::decode_png(&bytes)?;
            if ch != 1 {
                return Err(Error::Dataset(format!("{}: expected a gray mask", path.display())));
            }
            let labeled = mask.iter().filter(|&&y| y != crate::IGNORE_ID).count();
            Ok(PseudoLabeledSample {
                index: i,
                height: h,
                width: w,
                coverage: labeled as f64 / (h * w) as f64,
                mask,
            })
        })
        .collect()
}

/// One SGD iteration on a pretraining batch (`target` = None) or a
/// curriculum batch. Returns the loss values before the update.
pub fn train_step(
    model: &mut FctnModel<f32>,
    opt: &SgdOptimizer,
    cfg: &TrainConfig,
    source: BatchRef<'_, f32>,
    target: Option<BatchRef<'_, f32>>,
    weights: &ClassWeights,
) -> Result<LossBundle> {
    let hp = cfg.loss_weights();
    let bundle = match (target, cfg.update_mode) {
        (None, _) => {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, true);
            let bundle = losses::pretrain_loss(&mut g, model, &b, source, hp)?;
            check_finite(&bundle)?;
            g.backward(bundle.root)?;
            model.params.accumulate_grads(&g, &b);
            bundle
        }
        (Some(t), UpdateMode::Joint) => {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, true);
            let bundle = losses::total_loss(&mut g, model, &b, source, Some(t), Some(weights), hp)?;
            check_finite(&bundle)?;
            g.backward(bundle.root)?;
            model.params.accumulate_grads(&g, &b);
            bundle
        }
        (Some(t), UpdateMode::Sequential) => {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, true);
            let src = losses::total_loss(&mut g, model, &b, source, None, None, hp)?;
            check_finite(&src)?;
            g.backward(src.root)?;
            model.params.accumulate_grads(&g, &b);
            opt.step(&mut model.params)?;

            let mut g = Graph::new();
            let b = model.params.bind(&mut g, true);
            let xt = g.constant(t.images.clone());
            let feats = model.forward_base(&mut g, &b, xt)?;
            let mut acc = None;
            for br in Branch::ALL {
                let logits = model.forward_branch(&mut g, &b, br, feats)?;
                let (ce, _) = losses::ce_loss(&mut g, logits, t.masks, Some(weights))?;
                acc = Some(match acc {
                    None => ce,
                    Some(a) => g.add(a, ce)?,
                });
            }
            let mean = g.scale(acc.expect("three branches"), 1.0 / 3.0);
            let root = g.scale(mean, cfg.beta as f32);
            let l_tl = g.value(mean).item() as f64;
            if !l_tl.is_finite() {
                return Err(Error::Diverged(format!("pseudo-label loss is {l_tl}")));
            }
            g.backward(root)?;
            model.params.accumulate_grads(&g, &b);
            LossBundle {
                l_tl: Some(l_tl),
                total: src.total + cfg.beta * l_tl,
                ..src
            }
        }
    };
    opt.step(&mut model.params)?;
    Ok(bundle)
}

fn check_finite(b: &LossBundle) -> Result<()> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "total loss {} (L_w {}, L_S {}, L_Tl {:?})",
            b.total, b.l_w, b.l_s, b.l_tl
        )))
    }
}

/// The full schedule, optionally backed by a run directory for
/// checkpoints, logs and pseudo-label masks.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: TrainData<'a>,
    model: FctnModel<f32>,
    opt: SgdOptimizer,
    weights: ClassWeights,
    state: TrainerState,
    log: RunLog,
    run_dir: Option<PathBuf>,
    pseudo: Option<Vec<Vec<u8>>>,
    source_sampler: EpochSampler,
    target_sampler: Option<EpochSampler>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        spec: ArchSpec,
        data: TrainData<'a>,
        run_dir: Option<&Path>,
    ) -> Result<Self> {
        let model = FctnModel::new(spec, cfg.seed)?;
        Self::with_model(cfg, model, data, run_dir)
    }

    pub fn with_model(
        cfg: TrainConfig,
        model: FctnModel<f32>,
        data: TrainData<'a>,
        run_dir: Option<&Path>,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.source_images.is_empty() {
            return Err(Error::Dataset("the source set is empty".into()));
        }
        if data.source_images.len() != data.source_masks.len() {
            return Err(Error::Dataset("every source image needs a mask".into()));
        }
        if data.target_images.is_empty() {
            return Err(Error::Dataset("the target set is empty".into()));
        }
        let weights = losses::class_weights(data.source_masks.iter().copied(), model.num_classes())?;
        let opt = SgdOptimizer::new(cfg.learning_rate)?;
        let source_sampler = EpochSampler::new(data.source_images.len(), mix(cfg.seed, 1));
        let log = match run_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                RunLog::attach(d.join(LOG_FILE))?
            }
            None => RunLog::in_memory(),
        };
        Ok(Trainer {
            state: TrainerState {
                phase: Phase::Pretrain,
                step: 0,
                global_step: 0,
                source_sampler: source_sampler.state(),
                target_sampler: None,
                evals: Vec::new(),
                labelings: Vec::new(),
            },
            cfg,
            data,
            model,
            opt,
            weights,
            log,
            run_dir: run_dir.map(Path::to_path_buf),
            pseudo: None,
            source_sampler,
            target_sampler: None,
        })
    }

    /// Skips pretraining: the current weights count as the pretrained model.
    pub fn skip_pretraining(&mut self) {
        self.state.phase = Phase::Pretrain;
        self.state.step = self.cfg.pretrain_iters;
    }

    /// Restores model and schedule position from a checkpoint.
    pub fn resume_from(&mut self, path: &Path) -> Result<()> {
        let (model, state) = load_model(path)?;
        let state = state.ok_or_else(|| {
            Error::Checkpoint(format!("{}: no trainer state, cannot resume", path.display()))
        })?;
        if model.spec() != self.model.spec() {
            return Err(Error::Checkpoint(format!(
                "{}: architecture differs from the configured one",
                path.display()
            )));
        }
        self.model = model;
        self.source_sampler = EpochSampler::resume(self.data.source_images.len(), state.source_sampler);
        self.target_sampler = state
            .target_sampler
            .map(|s| EpochSampler::resume(self.data.target_images.len(), s));
        if let Phase::Round(r) = state.phase {
            if state.step > 0 {
                let dir = self.pseudo_dir(r).ok_or_else(|| {
                    Error::Checkpoint("mid-round resume needs the run directory".into())
                })?;
                let samples = load_label_masks(&dir, self.data.target_images.len())?;
                self.pseudo = Some(samples.into_iter().map(|s| s.mask).collect());
            }
        }
        self.state = state;
        self.log.push(LogEvent::Resumed {
            phase: self.state.phase,
            step: self.state.step,
        })?;
        info!("resumed at {:?} step {}", self.state.phase, self.state.step);
        Ok(())
    }

    pub fn model(&self) -> &FctnModel<f32> {
        &self.model
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn class_weights(&self) -> &ClassWeights {
        &self.weights
    }

    fn pseudo_dir(&self, round: usize) -> Option<PathBuf> {
        self.run_dir
            .as_ref()
            .map(|d| d.join("pseudo_labels").join(format!("round{round}")))
    }

    fn sync_samplers(&mut self) {
        self.state.source_sampler = self.source_sampler.state();
        self.state.target_sampler = self.target_sampler.as_ref().map(EpochSampler::state);
    }

    fn checkpoint(&mut self, file: &str) -> Result<()> {
        let Some(dir) = self.run_dir.clone() else {
            return Ok(());
        };
        self.sync_samplers();
        save_model(&self.model, Some((&self.cfg, &self.state)), dir.join(file))?;
        self.log.push(LogEvent::Checkpoint {
            phase: self.state.phase,
            step: self.state.step,
            file: file.to_string(),
        })
    }

    fn evaluate(&mut self, round: usize) -> Result<()> {
        let Some((images, masks)) = self.data.val else {
            return Ok(());
        };
        let report = evaluate_branch(&self.model, Branch::Ft, images, masks)?.iou_report();
        info!(
            "validation after {}: mIoU {}",
            if round == 0 { "pretraining".to_string() } else { format!("round {round}") },
            report.miou.map_or("n/a".into(), |m| format!("{:.2}", m * 100.0))
        );
        self.log.push(LogEvent::Eval {
            round,
            iou: report.iou.clone(),
            miou: report.miou,
        })?;
        self.state.evals.push(EvalRecord { round, report });
        Ok(())
    }

    /// Pseudo-labels the whole target set with the current F1/F2.
    pub fn relabel(&mut self, round: usize) -> Result<LabelSummary> {
        let cfg = PseudoLabelConfig {
            confidence_threshold: self.cfg.threshold,
        };
        let (samples, summary) = label_dataset(&self.model, self.data.target_images, &cfg)?;
        if summary.labeled_pixels == 0 {
            return Err(Error::NoCoverage(format!(
                "round {round}: F1 and F2 agree above confidence {} on no target pixel; \
                 lower the threshold or train longer",
                self.cfg.threshold
            )));
        }
        if let Some(dir) = self.pseudo_dir(round) {
            save_label_masks(&dir, &samples)?;
        }
        info!(
            "round {round}: pseudo-labeled {:.1}% of target pixels",
            100.0 * summary.labeled_pixels as f64 / summary.total_pixels as f64
        );
        self.log.push(LogEvent::Labeling {
            round,
            coverage: summary.mean_coverage,
            labeled_pixels: summary.labeled_pixels,
            total_pixels: summary.total_pixels,
            per_class: summary.per_class.clone(),
        })?;
        self.state.labelings.push(LabelRecord {
            round,
            summary: summary.clone(),
        });
        self.pseudo = Some(samples.into_iter().map(|s| s.mask).collect());
        Ok(summary)
    }

    fn step(&mut self) -> Result<()> {
        let bs = self.cfg.batch_size;
        let pair = match self.state.phase {
            Phase::Pretrain => sample_minibatch(
                (self.data.source_images, self.data.source_masks, &mut self.source_sampler),
                None,
                bs,
            )?,
            Phase::Round(_) => {
                let pseudo = self.pseudo.as_ref().expect("labels exist during a round");
                let masks: Vec<&[u8]> = pseudo.iter().map(Vec::as_slice).collect();
                let ts = self.target_sampler.as_mut().expect("target sampler exists during a round");
                sample_minibatch(
                    (self.data.source_images, self.data.source_masks, &mut self.source_sampler),
                    Some((self.data.target_images, &masks, ts)),
                    bs,
                )?
            }
            Phase::Done => return Ok(()),
        };
        let src = BatchRef {
            images: &pair.source.images,
            masks: &pair.source.masks,
        };
        let tgt = pair.target.as_ref().map(|t| BatchRef {
            images: &t.images,
            masks: &t.masks,
        });
        let b = train_step(&mut self.model, &self.opt, &self.cfg, src, tgt, &self.weights)?;
        self.state.step += 1;
        self.state.global_step += 1;
        self.log.push(LogEvent::Step {
            phase: self.state.phase,
            step: self.state.step,
            l_w: b.l_w,
            l_s: b.l_s,
            l_tl: b.l_tl,
            l_s_target_branch: b.l_s_target_branch,
            total: b.total,
        })?;
        if self.state.step % 100 == 0 {
            info!(
                "{:?} step {}: total {:.4} (L_w {:.4}, L_S {:.4}, L_Tl {})",
                self.state.phase,
                self.state.step,
                b.total,
                b.l_w,
                b.l_s,
                b.l_tl.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
        if self.cfg.checkpoint_every > 0 && self.state.global_step % self.cfg.checkpoint_every == 0 {
            self.checkpoint(LATEST_CHECKPOINT)?;
        }
        Ok(())
    }

    /// Runs the schedule from the current position. Returns `false` if it
    /// stopped early because of `stop_after`.
    pub fn run(&mut self, stop_after: Option<usize>) -> Result<bool> {
        let stop = |s: &Self| stop_after.is_some_and(|n| s.state.global_step >= n);
        loop {
            match self.state.phase {
                Phase::Pretrain => {
                    while self.state.step < self.cfg.pretrain_iters {
                        if stop(self) {
                            self.checkpoint(LATEST_CHECKPOINT)?;
                            return Ok(false);
                        }
                        self.step()?;
                    }
                    self.evaluate(0)?;
                    self.checkpoint("pretrain.ckpt")?;
                    self.state.phase = Phase::Round(1);
                    self.state.step = 0;
                }
                Phase::Round(r) => {
                    if self.state.step == 0 {
                        self.relabel(r)?;
                        self.target_sampler = Some(EpochSampler::new(
                            self.data.target_images.len(),
                            target_sampler_seed(self.cfg.seed, r),
                        ));
                    }
                    while self.state.step < self.cfg.steps_per_round {
                        if stop(self) {
                            self.checkpoint(LATEST_CHECKPOINT)?;
                            return Ok(false);
                        }
                        self.step()?;
                    }
                    self.evaluate(r)?;
                    self.checkpoint(&format!("round{r}.ckpt"))?;
                    self.target_sampler = None;
                    self.pseudo = None;
                    self.state.step = 0;
                    self.state.phase = if r < self.cfg.rounds {
                        Phase::Round(r + 1)
                    } else {
                        Phase::Done
                    };
                }
                Phase::Done => {
                    self.sync_samplers();
                    self.checkpoint(FINAL_CHECKPOINT)?;
                    self.checkpoint(LATEST_CHECKPOINT)?;
                    if let Some(dir) = &self.run_dir {
                        let path = dir.join(METRICS_FILE);
                        fs::write(&path, metrics_text(&self.state, self.model.num_classes()))
                            .map_err(|e| Error::io(&path, e))?;
                    }
                    return Ok(true);
                }
            }
        }
    }

    pub fn into_outcome(self, finished: bool) -> RunOutcome {
        RunOutcome {
            model: self.model,
            state: self.state,
            log: self.log,
            finished,
        }
    }
}

/// Pretraining only: `iters` steps on source minibatches.
pub fn pretrain(
    model: &mut FctnModel<f32>,
    source_images: &[Tensor<f32>],
    source_masks: &[&[u8]],
    cfg: &TrainConfig,
    iters: usize,
    log: &mut RunLog,
) -> Result<()> {
    let opt = SgdOptimizer::new(cfg.learning_rate)?;
    let weights = ClassWeights::uniform(model.num_classes());
    let mut sampler = EpochSampler::new(source_images.len(), mix(cfg.seed, 1));
    for step in 1..=iters {
        let pair = sample_minibatch((source_images, source_masks, &mut sampler), None, cfg.batch_size)?;
        let b = train_step(
            model,
            &opt,
            cfg,
            BatchRef {
                images: &pair.source.images,
                masks: &pair.source.masks,
            },
            None,
            &weights,
        )?;
        log.push(LogEvent::Step {
            phase: Phase::Pretrain,
            step,
            l_w: b.l_w,
            l_s: b.l_s,
            l_tl: None,
            l_s_target_branch: b.l_s_target_branch,
            total: b.total,
        })?;
    }
    Ok(())
}

/// Full run in a run directory (created if needed).
pub fn run(
    cfg: &TrainConfig,
    spec: &ArchSpec,
    data: TrainData<'_>,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let mut trainer = match &opts.init {
        Some(path) if !opts.resume => {
            let (model, _) = load_model(path)?;
            if model.spec() != spec {
                warn!("initial checkpoint architecture overrides the configured one");
            }
            let mut t = Trainer::with_model(cfg.clone(), model, data, Some(run_dir))?;
            t.skip_pretraining();
            t
        }
        _ => Trainer::new(cfg.clone(), spec.clone(), data, Some(run_dir))?,
    };
    if opts.resume {
        trainer.resume_from(&run_dir.join(LATEST_CHECKPOINT))?;
    }
    let finished = trainer.run(opts.stop_after)?;
    Ok(trainer.into_outcome(finished))
}

/// `metrics.txt` body: one block per validation, no timestamps.
pub fn metrics_text(state: &TrainerState, num_classes: usize) -> String {
    let names: Vec<&str> = (0..num_classes)
        .map(|c| crate::data::CLASS_NAMES.get(c).copied().unwrap_or("class"))
        .collect();
    let mut s = String::new();
    for e in &state.evals {
        let prefix = if e.round == 0 {
            "pretrain".to_string()
        } else {
            format!("round{}", e.round)
        };
        s.push_str(&e.report.metric_lines(&prefix, &names));
    }
    for l in &state.labelings {
        let sum = &l.summary;
        s.push_str(&format!(
            "round{}.pseudo_coverage {:.6}\n",
            l.round,
            sum.labeled_pixels as f64 / sum.total_pixels.max(1) as f64
        ));
    }
    s
}
