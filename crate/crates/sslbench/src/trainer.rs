//! Training loops: supervised fine-tuning of the three dense/classification
//! tasks and the three self-supervised pretraining algorithms, with a
//! patience-based learning-rate schedule, strict-improvement checkpointing,
//! and per-epoch run records.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use autograd::{AdamW, Arr, Binder, Linear, Mode, ParamSet, Tape, Var};

use crate::augment::{apply_to_targets, make_view_pair, preprocess_eval, preprocess_train, AugmentConfig};
use crate::config::Config;
use crate::data::{class_weights, count_classes, Dataset, SplitManifest, Target, TaskKind};
use crate::encoders::{
    kaiming_init, load_matching, patchify, write_checkpoint, ConvConfig, ConvEncoder,
    TransformerTrunk, ViTEncoder, VitConfig,
};
use crate::heads::{dice_loss, ssi_mse_loss, weighted_cross_entropy, ClassifyHead, FusionDecoder};
use crate::metrics::{
    classification_metrics, confusion, segmentation_metrics, ssi_mse, ClassificationMetrics,
    DepthMetrics, SegMetrics,
};
use crate::encoders::ema_update;
use crate::heads::ssi_align;
use crate::ssl::{barlow_loss, barlow_normalize, mae_loss, mae_mask, mae_reinsert, moco_v3_loss,
    MocoShard, ProjectionMlp, SslConfig};
use crate::{Error, Result};

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Epochs without validation improvement before the rate halves.
    pub patience: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Working resolution.
    pub side: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 48,
            epochs: 50,
            lr: 1e-4,
            lr_floor: 1e-6,
            patience: 10,
            weight_decay: 1e-4,
            seed: 0,
            side: 64,
        }
    }
}

impl TrainConfig {
    /// Scaled-down settings for laptop-class runs.
    pub fn desk() -> Self {
        Self {
            batch: 12,
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::desk();
        Ok(Self {
            batch: cfg.usize_or("train.batch", d.batch)?,
            epochs: cfg.usize_or("train.epochs", d.epochs)?,
            lr: cfg.f64_or("train.lr", d.lr)?,
            lr_floor: cfg.f64_or("train.lr_floor", d.lr_floor)?,
            patience: cfg.usize_or("train.patience", d.patience)?,
            weight_decay: cfg.f64_or("train.weight_decay", d.weight_decay)?,
            seed: cfg.u64_or("seed", d.seed)?,
            side: cfg.usize_or("train.side", d.side)?,
        })
    }
}

/// Patience-driven step schedule: after `patience` consecutive epochs
/// without improvement the rate halves (never below the floor) and the
/// stale counter resets.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub rate: f64,
    pub floor: f64,
    pub patience: usize,
    stale: usize,
}

impl LrSchedule {
    pub fn new(rate: f64, floor: f64, patience: usize) -> Self {
        Self { rate, floor, patience, stale: 0 }
    }

    /// Feed one epoch's outcome; returns the rate for the next epoch.
    pub fn observe(&mut self, improved: bool) -> f64 {
        if improved {
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.rate = (self.rate / 2.0).max(self.floor);
                self.stale = 0;
            }
        }
        self.rate
    }
}

/// Encoder architecture choice, stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Conv(ConvConfig),
    Vit(VitConfig),
}

impl ArchConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            ArchConfig::Conv(c) => *c.widths.last().unwrap(),
            ArchConfig::Vit(v) => v.dim,
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        match cfg.str_or("arch", "conv") {
            "conv" => {
                let mut c = ConvConfig::default();
                if let Some(w) = cfg.opt_str("arch.widths") {
                    c.widths = w
                        .split(',')
                        .map(|p| p.trim().parse().map_err(|_| {
                            Error::Invalid(format!("arch.widths: bad entry {p:?}"))
                        }))
                        .collect::<Result<_>>()?;
                }
                c.blocks_per_stage = cfg.usize_or("arch.blocks_per_stage", c.blocks_per_stage)?;
                Ok(ArchConfig::Conv(c))
            }
            "vit" => {
                let d = VitConfig::default();
                Ok(ArchConfig::Vit(VitConfig {
                    patch: cfg.usize_or("arch.patch", d.patch)?,
                    dim: cfg.usize_or("arch.dim", d.dim)?,
                    depth: cfg.usize_or("arch.depth", d.depth)?,
                    heads: cfg.usize_or("arch.heads", d.heads)?,
                    window: cfg.usize_or("arch.window", d.window)?,
                    frozen_patch_embed: cfg.bool_or("arch.frozen_patch_embed", false)?,
                }))
            }
            other => Err(Error::Invalid(format!("unknown arch {other:?}"))),
        }
    }
}

/// Either encoder behind one interface.
pub enum Encoder {
    Conv(ConvEncoder),
    Vit(ViTEncoder),
}

/// Encoder outputs in the common shape the heads need.
struct Features {
    /// `[N, d]` global vector (pooled or class token).
    global: Var,
    /// Spatial maps `[N, c, s, s]`, shallow to deep.
    grids: Vec<Var>,
}

impl Encoder {
    fn build(
        pset: &mut ParamSet,
        arch: &ArchConfig,
        side: usize,
        init: &mut dyn FnMut(&[usize]) -> Arr,
    ) -> Result<Self> {
        Ok(match arch {
            ArchConfig::Conv(c) => Encoder::Conv(ConvEncoder::new(pset, "enc", c.clone(), init)),
            ArchConfig::Vit(v) => Encoder::Vit(ViTEncoder::new(pset, "enc", v.clone(), side, init)?),
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &mut ParamSet,
        batch: &Array4<f64>,
        mode: Mode,
    ) -> Result<Features> {
        match self {
            Encoder::Conv(enc) => {
                let x = tape.leaf(batch.clone().into_dyn());
                let f = enc.forward(tape, binder, pset, x, mode)?;
                Ok(Features {
                    global: f.pooled,
                    grids: f.maps,
                })
            }
            Encoder::Vit(enc) => {
                let f = enc.forward(tape, binder, pset, batch)?;
                let g = enc.grid;
                let grids = f
                    .taps
                    .iter()
                    .map(|&tap| crate::heads::tokens_to_grid(tape, tap, g))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Features { global: f.cls, grids })
            }
        }
    }
}

enum TaskHead {
    Classify(ClassifyHead),
    Seg(FusionDecoder),
    Depth(FusionDecoder),
}

/// An encoder plus one task head with all parameters.
pub struct TaskModel {
    pub pset: ParamSet,
    pub arch: ArchConfig,
    pub task: TaskKind,
    pub side: usize,
    pub classes: usize,
    encoder: Encoder,
    head: TaskHead,
}

/// How many deep feature levels the depth decoder consumes.
const DEPTH_LEVELS: usize = 3;

impl TaskModel {
    pub fn new(
        arch: &ArchConfig,
        task: TaskKind,
        side: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(seed);
        let encoder = Encoder::build(&mut pset, arch, side, &mut init)?;
        let channels: Vec<usize> = match arch {
            ArchConfig::Conv(c) => c.widths.clone(),
            ArchConfig::Vit(v) => vec![v.dim; 4],
        };
        let head = match task {
            TaskKind::Classification => TaskHead::Classify(ClassifyHead::new(
                &mut pset,
                "head.fc",
                arch.embed_dim(),
                classes,
                &mut init,
            )),
            TaskKind::Segmentation => TaskHead::Seg(FusionDecoder::new(
                &mut pset,
                "head.seg",
                &channels,
                side,
                &mut init,
            )?),
            TaskKind::Depth => TaskHead::Depth(FusionDecoder::new(
                &mut pset,
                "head.depth",
                &channels[channels.len() - DEPTH_LEVELS..],
                side,
                &mut init,
            )?),
            TaskKind::Detection => {
                return Err(Error::Invalid(
                    "detection is scored from prediction files, not fine-tuned".into(),
                ))
            }
        };
        Ok(Self {
            pset,
            arch: arch.clone(),
            task,
            side,
            classes,
            encoder,
            head,
        })
    }

    /// Forward a batch to task predictions: logits `[N, C]` for
    /// classification, probabilities `[N, 1, S, S]` otherwise.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &Array4<f64>,
        mode: Mode,
    ) -> Result<Var> {
        let feats = self
            .encoder
            .forward(tape, binder, &mut self.pset, batch, mode)?;
        match &self.head {
            TaskHead::Classify(h) => Ok(h.forward(tape, binder, &self.pset, feats.global)),
            TaskHead::Seg(h) => h.forward(tape, binder, &mut self.pset, &feats.grids, mode),
            TaskHead::Depth(h) => {
                let deep = &feats.grids[feats.grids.len() - DEPTH_LEVELS..];
                h.forward(tape, binder, &mut self.pset, deep, mode)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub lr: f64,
}

/// Everything a run leaves behind besides checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub wall_secs: f64,
}

/// Whether larger validation values are better for the task.
pub fn higher_is_better(task: TaskKind) -> bool {
    !matches!(task, TaskKind::Depth)
}

/// Trailing-window moving average, used to judge loss trends.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(w - 1);
            values[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
        })
        .collect()
}

fn stack_images(images: &[Array3<f64>]) -> Array4<f64> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, step })
    }
}

fn row_vec(tape: &mut Tape, m: Var, i: usize) -> Var {
    let d = tape.value(m).shape()[1];
    let r = tape.slice_axis(m, 0, i, i + 1);
    tape.reshape(r, &[d])
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct PreparedBatch {
    images: Array4<f64>,
    labels: Vec<usize>,
    masks: Option<Array3<f64>>,
    depths: Vec<(Array2<f64>, Array2<f64>)>,
}

fn prepare_train_batch(
    ds: &Dataset,
    idx: &[usize],
    acfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    let mut images = Vec::with_capacity(idx.len());
    let mut labels = Vec::new();
    let mut masks: Vec<Array2<f64>> = Vec::new();
    let mut depths = Vec::new();
    for &i in idx {
        let s = &ds.samples[i];
        let (img, rec) = preprocess_train(&s.image, ds.task, acfg, rng.gen());
        images.push(img);
        match apply_to_targets(&rec, &s.target).target {
            Target::Class(c) => labels.push(c),
            Target::Mask(m) => masks.push(m.mapv(|b| if b { 1.0 } else { 0.0 })),
            Target::Depth { depth, lens } => {
                depths.push((depth, lens.mapv(|b| if b { 1.0 } else { 0.0 })));
            }
            Target::Boxes(_) => {
                return Err(Error::Invalid("box targets have no fine-tuning loss".into()))
            }
        }
    }
    let images = stack_images(&images);
    let masks = if masks.is_empty() {
        None
    } else {
        let (h, w) = masks[0].dim();
        let mut m = Array3::zeros((masks.len(), h, w));
        for (i, plane) in masks.iter().enumerate() {
            m.index_axis_mut(ndarray::Axis(0), i).assign(plane);
        }
        Some(m)
    };
    Ok(PreparedBatch { images, labels, masks, depths })
}

fn batch_loss(
    model: &mut TaskModel,
    tape: &mut Tape,
    binder: &mut Binder,
    batch: &PreparedBatch,
    weights: &[f64],
) -> Result<Var> {
    let pred = model.forward(tape, binder, &batch.images, Mode::Train)?;
    match model.task {
        TaskKind::Classification => weighted_cross_entropy(tape, pred, &batch.labels, weights),
        TaskKind::Segmentation => {
            let masks = batch.masks.as_ref().expect("segmentation batch without masks");
            dice_loss(tape, pred, masks)
        }
        TaskKind::Depth => {
            let n = batch.depths.len();
            let mut acc = tape.scalar(0.0);
            for (i, (depth, lens)) in batch.depths.iter().enumerate() {
                let side = depth.dim().0;
                let p = tape.slice_axis(pred, 0, i, i + 1);
                let p = tape.reshape(p, &[side, side]);
                let l = ssi_mse_loss(tape, p, depth, lens)?;
                acc = tape.add(acc, l);
            }
            Ok(tape.mul_scalar(acc, 1.0 / n as f64))
        }
        TaskKind::Detection => unreachable!("rejected at model construction"),
    }
}

/// Run validation and return the task's scalar metric (mF1, mDice, or
/// mean SSI-MSE).
pub fn validate(
    model: &mut TaskModel,
    ds: &Dataset,
    indices: &[usize],
    acfg: &AugmentConfig,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    match model.task {
        TaskKind::Classification => {
            let m = eval_classification(model, ds, indices, acfg)?;
            Ok(m.m_f1)
        }
        TaskKind::Segmentation => {
            let m = eval_segmentation(model, ds, indices, acfg)?;
            Ok(m.m_dice)
        }
        TaskKind::Depth => {
            let mut total = 0.0;
            for &i in indices {
                let s = &ds.samples[i];
                let (img, rec) = preprocess_eval(&s.image, ds.task, acfg);
                let pred = infer_plane(model, &img)?;
                let Target::Depth { depth, lens } = apply_to_targets(&rec, &s.target).target
                else {
                    return Err(Error::Invalid("depth sample without depth target".into()));
                };
                let lens = lens.mapv(|b| if b { 1.0 } else { 0.0 });
                total += ssi_mse(&pred, &depth, &lens)?;
            }
            Ok(total / indices.len() as f64)
        }
        TaskKind::Detection => Err(Error::Invalid("detection has no validation loop".into())),
    }
}

fn infer_logits(model: &mut TaskModel, img: &Array3<f64>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let batch = stack_images(std::slice::from_ref(img));
    let out = model.forward(&mut tape, &mut binder, &batch, Mode::Eval)?;
    Ok(tape.value(out).iter().copied().collect())
}

fn infer_plane(model: &mut TaskModel, img: &Array3<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let batch = stack_images(std::slice::from_ref(img));
    let out = model.forward(&mut tape, &mut binder, &batch, Mode::Eval)?;
    let side = model.side;
    Ok(Array2::from_shape_fn((side, side), |(y, x)| {
        tape.value(out)[[0, 0, y, x]]
    }))
}

/// Classification metrics on a sample subset.
pub fn eval_classification(
    model: &mut TaskModel,
    ds: &Dataset,
    indices: &[usize],
    acfg: &AugmentConfig,
) -> Result<ClassificationMetrics> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for &i in indices {
        let s = &ds.samples[i];
        let (img, _) = preprocess_eval(&s.image, ds.task, acfg);
        let logits = infer_logits(model, &img)?;
        let best = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        preds.push(best);
        let Target::Class(c) = s.target else {
            return Err(Error::Invalid("classification sample without label".into()));
        };
        labels.push(c);
    }
    Ok(classification_metrics(&confusion(&preds, &labels, model.classes)?))
}

/// Segmentation metrics against original-resolution masks.
pub fn eval_segmentation(
    model: &mut TaskModel,
    ds: &Dataset,
    indices: &[usize],
    acfg: &AugmentConfig,
) -> Result<SegMetrics> {
    let mut probs = Vec::new();
    let mut truths = Vec::new();
    for &i in indices {
        let s = &ds.samples[i];
        let (img, _) = preprocess_eval(&s.image, ds.task, acfg);
        probs.push(infer_plane(model, &img)?);
        let Target::Mask(ref m) = s.target else {
            return Err(Error::Invalid("segmentation sample without mask".into()));
        };
        truths.push(m.clone());
    }
    segmentation_metrics(&probs, &truths)
}

/// Depth metrics in centimetres on the original frames: per image the
/// working-resolution prediction is aligned to the transformed target and
/// post-processed back to the original frame.
pub fn eval_depth(
    model: &mut TaskModel,
    ds: &Dataset,
    indices: &[usize],
    acfg: &AugmentConfig,
) -> Result<DepthMetrics> {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut lenses = Vec::new();
    for &i in indices {
        let s = &ds.samples[i];
        let (img, rec) = preprocess_eval(&s.image, ds.task, acfg);
        let pred = infer_plane(model, &img)?;
        let Target::Depth { depth: wdepth, lens: wlens } =
            apply_to_targets(&rec, &s.target).target
        else {
            return Err(Error::Invalid("depth sample without depth target".into()));
        };
        let align = ssi_align(&pred, &wdepth, &wlens.mapv(|b| if b { 1.0 } else { 0.0 }))?;
        let Target::Depth { depth: odepth, lens: olens } = &s.target else {
            unreachable!()
        };
        let (h, w) = odepth.dim();
        preds.push(crate::metrics::depth_postprocess(&pred, align, h, w, olens)?);
        truths.push(odepth.mapv(|v| v * crate::metrics::DEPTH_RANGE_CM));
        lenses.push(olens.clone());
    }
    crate::metrics::depth_metrics(&preds, &truths, &lenses)
}

/// Fine-tune a model on the training split, validating each epoch and
/// checkpointing on strict improvement.
pub fn finetune(
    ds: &Dataset,
    split: &SplitManifest,
    arch: &ArchConfig,
    tcfg: &TrainConfig,
    init_from: Option<&ParamSet>,
    out_dir: Option<&Path>,
) -> Result<(TaskModel, RunRecord)> {
    let start = Instant::now();
    if split.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = ds.class_names.len().max(1);
    let mut model = TaskModel::new(arch, ds.task, tcfg.side, classes, tcfg.seed)?;
    if let Some(src) = init_from {
        load_matching(&mut model.pset, src);
    }
    let weights = if ds.task == TaskKind::Classification {
        let mut counts = vec![0usize; classes];
        for &i in &split.train {
            if let Target::Class(c) = ds.samples[i].target {
                counts[c] += 1;
            }
        }
        if counts.iter().any(|&c| c == 0) {
            // weighting needs every class in the training split; fall back
            // to whole-dataset counts
            class_weights(&count_classes(ds)?)?.weights
        } else {
            class_weights(&counts)?.weights
        }
    } else {
        vec![1.0; classes]
    };
    let acfg = AugmentConfig { side: tcfg.side, ..AugmentConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut sched = LrSchedule::new(tcfg.lr, tcfg.lr_floor, tcfg.patience);
    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let higher = higher_is_better(ds.task);
    let mut best: Option<(usize, f64)> = None;
    let mut record = RunRecord {
        task: ds.task.as_str().to_string(),
        epochs: Vec::new(),
        best_epoch: None,
        best_metric: None,
        wall_secs: 0.0,
    };
    for epoch in 0..tcfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(tcfg.batch).enumerate() {
            let batch = prepare_train_batch(ds, chunk, &acfg, &mut rng)?;
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let loss = batch_loss(&mut model, &mut tape, &mut binder, &batch, &weights)?;
            let lv = tape.scalar_value(loss);
            check_finite(lv, epoch, step)?;
            loss_sum += lv;
            steps += 1;
            let grads = tape.backward(loss);
            binder.write_grads(&grads, &mut model.pset);
            opt.lr = sched.rate;
            opt.step(&mut model.pset);
        }
        let train_loss = loss_sum / steps.max(1) as f64;
        let val_metric = if split.val.is_empty() {
            None
        } else {
            Some(validate(&mut model, ds, &split.val, &acfg)?)
        };
        let improved = match (val_metric, best) {
            (Some(_), None) => true,
            (Some(v), Some((_, b))) => {
                if higher {
                    v > b
                } else {
                    v < b
                }
            }
            (None, _) => false,
        };
        if improved {
            let v = val_metric.unwrap();
            best = Some((epoch, v));
            record.best_epoch = Some(epoch);
            record.best_metric = Some(v);
            if let Some(dir) = out_dir {
                save_model(&model, &dir.join("best.ckpt"), tcfg.seed, &[
                    ("stage", "finetune"),
                    ("task", ds.task.as_str()),
                    ("epoch", &epoch.to_string()),
                ])?;
            }
        }
        let lr_now = sched.rate;
        sched.observe(improved);
        record.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            lr: lr_now,
        });
    }
    record.wall_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        save_model(&model, &dir.join("final.ckpt"), tcfg.seed, &[
            ("stage", "finetune"),
            ("task", ds.task.as_str()),
            ("epoch", "final"),
        ])?;
        std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok((model, record))
}

fn save_model(
    model: &TaskModel,
    path: &Path,
    seed: u64,
    provenance: &[(&str, &str)],
) -> Result<()> {
    let prov: BTreeMap<String, String> = provenance
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    write_checkpoint(path, &model.pset, serde_json::to_value(&model.arch)?, seed, prov)
}

/// Rebuild a fine-tuned model from a checkpoint.
pub fn load_model(path: &Path, task: TaskKind, side: usize, classes: usize) -> Result<TaskModel> {
    let (header, params) = crate::encoders::read_checkpoint(path)?;
    let arch: ArchConfig = serde_json::from_value(header.arch)?;
    let mut model = TaskModel::new(&arch, task, side, classes, header.seed)?;
    let filled = load_matching(&mut model.pset, &params);
    if filled == 0 {
        return Err(Error::Invalid(format!(
            "checkpoint {} shares no parameters with a {}/{} model",
            path.display(),
            match arch {
                ArchConfig::Conv(_) => "conv",
                ArchConfig::Vit(_) => "vit",
            },
            task.as_str()
        )));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainAlgo {
    MocoV3,
    Barlow,
    Mae,
    /// Supervised classification used as a pretraining stand-in.
    SupervisedProxy,
}

impl PretrainAlgo {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mocov3" => Ok(Self::MocoV3),
            "barlow" => Ok(Self::Barlow),
            "mae" => Ok(Self::Mae),
            "supervised" => Ok(Self::SupervisedProxy),
            other => Err(Error::Invalid(format!("unknown pretraining algorithm {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MocoV3 => "mocov3",
            Self::Barlow => "barlow",
            Self::Mae => "mae",
            Self::SupervisedProxy => "supervised",
        }
    }
}

/// Masked-reconstruction decoder: token embedding into a narrower width,
/// learnt mask token and positions, a 2-block trunk, and a pixel head.
struct MaeDecoder {
    embed: Linear,
    mask_token: autograd::ParamId,
    pos: autograd::ParamId,
    trunk: TransformerTrunk,
    head: Linear,
    dim: usize,
}

impl MaeDecoder {
    fn new(
        pset: &mut ParamSet,
        enc_dim: usize,
        tokens: usize,
        patch_dim: usize,
        init: &mut dyn FnMut(&[usize]) -> Arr,
    ) -> Self {
        let dim = (enc_dim / 2).max(4);
        let heads = if dim % 2 == 0 { 2 } else { 1 };
        Self {
            embed: Linear::new(pset, "dec.embed", enc_dim, dim, init),
            mask_token: pset.add("dec.mask_token", init(&[dim]).mapv(|v| v * 0.1), true),
            pos: pset.add("dec.pos", init(&[tokens, dim]).mapv(|v| v * 0.1), true),
            trunk: TransformerTrunk::new(pset, "dec.trunk", dim, 2, heads, |_| 0, init),
            head: Linear::new(pset, "dec.head", dim, patch_dim, init),
            dim,
        }
    }
}

fn global_rows(
    enc: &Encoder,
    tape: &mut Tape,
    binder: &mut Binder,
    pset: &mut ParamSet,
    batch: &Array4<f64>,
) -> Result<Var> {
    let f = enc.forward(tape, binder, pset, batch, Mode::Train)?;
    Ok(f.global)
}

/// Pretrain an encoder; returns its parameters (encoder slots prefixed
/// `enc.`) and the loss history.
pub fn pretrain(
    ds: &Dataset,
    algo: PretrainAlgo,
    arch: &ArchConfig,
    scfg: &SslConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ParamSet, RunRecord)> {
    let start = Instant::now();
    if ds.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if algo == PretrainAlgo::Mae && matches!(arch, ArchConfig::Conv(_)) {
        return Err(Error::MaeNeedsTokens);
    }
    if algo == PretrainAlgo::SupervisedProxy {
        return pretrain_supervised(ds, arch, tcfg, out_dir, start);
    }
    if scfg.workers == 0 || tcfg.batch % scfg.workers != 0 {
        return Err(Error::Invalid(format!(
            "batch {} does not divide into {} workers",
            tcfg.batch, scfg.workers
        )));
    }
    let per_worker = tcfg.batch / scfg.workers;
    let mut pset = ParamSet::new();
    let mut init = kaiming_init(tcfg.seed);
    let encoder = Encoder::build(&mut pset, arch, tcfg.side, &mut init)?;
    let d = arch.embed_dim();
    let projector = ProjectionMlp::new(&mut pset, "proj", d, 4 * d, d, &mut init);
    let predictor = if algo == PretrainAlgo::MocoV3 {
        Some(ProjectionMlp::new(&mut pset, "pred", d, 4 * d, d, &mut init))
    } else {
        None
    };
    let mae = if algo == PretrainAlgo::Mae {
        let ArchConfig::Vit(v) = arch else { unreachable!() };
        let g = tcfg.side / v.patch;
        Some(MaeDecoder::new(
            &mut pset,
            v.dim,
            g * g,
            3 * v.patch * v.patch,
            &mut init,
        ))
    } else {
        None
    };
    let mut shadow = if algo == PretrainAlgo::MocoV3 {
        Some(pset.clone())
    } else {
        None
    };
    let acfg = AugmentConfig { side: tcfg.side, ..AugmentConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5355_4c50);
    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let mut record = RunRecord {
        task: format!("pretrain-{}", algo.as_str()),
        epochs: Vec::new(),
        best_epoch: None,
        best_metric: None,
        wall_secs: 0.0,
    };
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    for epoch in 0..tcfg.epochs {
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(tcfg.batch).enumerate() {
            if chunk.len() < tcfg.batch && algo != PretrainAlgo::Mae {
                continue; // contrastive losses need full worker shards
            }
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let loss = match algo {
                PretrainAlgo::MocoV3 => step_moco(
                    &encoder,
                    &projector,
                    predictor.as_ref().unwrap(),
                    &mut pset,
                    shadow.as_mut().unwrap(),
                    &mut tape,
                    &mut binder,
                    ds,
                    chunk,
                    &acfg,
                    scfg,
                    per_worker,
                    &mut rng,
                )?,
                PretrainAlgo::Barlow => step_barlow(
                    &encoder,
                    &projector,
                    &mut pset,
                    &mut tape,
                    &mut binder,
                    ds,
                    chunk,
                    &acfg,
                    scfg,
                    per_worker,
                    &mut rng,
                )?,
                PretrainAlgo::Mae => step_mae(
                    &encoder,
                    mae.as_ref().unwrap(),
                    &mut pset,
                    &mut tape,
                    &mut binder,
                    ds,
                    chunk,
                    &acfg,
                    scfg,
                    &mut rng,
                )?,
                PretrainAlgo::SupervisedProxy => unreachable!(),
            };
            let lv = tape.scalar_value(loss);
            check_finite(lv, epoch, step)?;
            loss_sum += lv;
            steps += 1;
            let grads = tape.backward(loss);
            binder.write_grads(&grads, &mut pset);
            opt.step(&mut pset);
            if let Some(sh) = shadow.as_mut() {
                ema_update(sh, &pset, scfg.momentum)?;
            }
        }
        if steps == 0 {
            return Err(Error::Invalid(format!(
                "dataset of {} samples yields no full batches of {}",
                ds.samples.len(),
                tcfg.batch
            )));
        }
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_metric: None,
            lr: opt.lr,
        });
    }
    record.wall_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        let prov: BTreeMap<String, String> = [
            ("stage".to_string(), "pretrain".to_string()),
            ("algorithm".to_string(), algo.as_str().to_string()),
            ("seed".to_string(), tcfg.seed.to_string()),
        ]
        .into();
        write_checkpoint(
            &dir.join("pretrained.ckpt"),
            &pset,
            serde_json::to_value(arch)?,
            tcfg.seed,
            prov,
        )?;
        std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok((pset, record))
}

#[allow(clippy::too_many_arguments)]
fn step_moco(
    encoder: &Encoder,
    projector: &ProjectionMlp,
    predictor: &ProjectionMlp,
    pset: &mut ParamSet,
    shadow: &mut ParamSet,
    tape: &mut Tape,
    binder: &mut Binder,
    ds: &Dataset,
    chunk: &[usize],
    acfg: &AugmentConfig,
    scfg: &SslConfig,
    per_worker: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (x1, x2) = view_batches(ds, chunk, acfg, rng);
    // online branch: encoder -> projector -> predictor
    let q1 = online_embed(encoder, projector, Some(predictor), pset, tape, binder, &x1)?;
    let q2 = online_embed(encoder, projector, Some(predictor), pset, tape, binder, &x2)?;
    // momentum branch: EMA copy, untracked binds
    let mut sink = Binder::new();
    let f1 = global_rows(encoder, tape, &mut sink, shadow, &x1)?;
    let k1 = projector.forward(tape, &mut sink, shadow, f1, Mode::Train);
    let f2 = global_rows(encoder, tape, &mut sink, shadow, &x2)?;
    let k2 = projector.forward(tape, &mut sink, shadow, f2, Mode::Train);
    let workers = chunk.len() / per_worker;
    let mut shards = Vec::with_capacity(workers);
    for w in 0..workers {
        let rows = |m: Var, tape: &mut Tape| -> Vec<Var> {
            (0..per_worker)
                .map(|i| row_vec(tape, m, w * per_worker + i))
                .collect()
        };
        shards.push(MocoShard {
            q1: rows(q1, tape),
            q2: rows(q2, tape),
            k1: rows(k1, tape),
            k2: rows(k2, tape),
        });
    }
    let losses = moco_v3_loss(tape, &shards, scfg.tau)?;
    let mut acc = tape.scalar(0.0);
    for l in losses {
        acc = tape.add(acc, l);
    }
    Ok(tape.mul_scalar(acc, 1.0 / workers as f64))
}

#[allow(clippy::too_many_arguments)]
fn step_barlow(
    encoder: &Encoder,
    projector: &ProjectionMlp,
    pset: &mut ParamSet,
    tape: &mut Tape,
    binder: &mut Binder,
    ds: &Dataset,
    chunk: &[usize],
    acfg: &AugmentConfig,
    scfg: &SslConfig,
    per_worker: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (x1, x2) = view_batches(ds, chunk, acfg, rng);
    let z1 = online_embed(encoder, projector, None, pset, tape, binder, &x1)?;
    let z2 = online_embed(encoder, projector, None, pset, tape, binder, &x2)?;
    let workers = chunk.len() / per_worker;
    let mut pairs = Vec::with_capacity(workers);
    for w in 0..workers {
        let s1 = tape.slice_axis(z1, 0, w * per_worker, (w + 1) * per_worker);
        let s2 = tape.slice_axis(z2, 0, w * per_worker, (w + 1) * per_worker);
        let n1 = barlow_normalize(tape, s1)?;
        let n2 = barlow_normalize(tape, s2)?;
        pairs.push((n1, n2));
    }
    barlow_loss(tape, &pairs, scfg.lambda)
}

fn step_mae(
    encoder: &Encoder,
    dec: &MaeDecoder,
    pset: &mut ParamSet,
    tape: &mut Tape,
    binder: &mut Binder,
    ds: &Dataset,
    chunk: &[usize],
    acfg: &AugmentConfig,
    scfg: &SslConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let Encoder::Vit(vit) = encoder else {
        return Err(Error::MaeNeedsTokens);
    };
    let mut acc = tape.scalar(0.0);
    for &i in chunk {
        let s = &ds.samples[i];
        let (img, _) = preprocess_train(&s.image, TaskKind::Classification, acfg, rng.gen());
        let batch = stack_images(std::slice::from_ref(&img));
        let patches = patchify(&batch, vit.cfg.patch)?;
        let t = patches.dim().1;
        let plan = mae_mask(t, scfg.gamma, rng.gen())?;
        let kept = plan.kept_indices().to_vec();
        let kept_patches = {
            let pd = patches.dim().2;
            let mut out = Array3::zeros((1, kept.len(), pd));
            for (j, &tok) in kept.iter().enumerate() {
                out.index_axis_mut(ndarray::Axis(1), j)
                    .assign(&patches.index_axis(ndarray::Axis(1), tok));
            }
            out
        };
        // encoder runs on visible tokens (plus cls) only
        let x = vit.embed_patches(tape, binder, pset, &kept_patches, &kept);
        let outs = vit.trunk.forward(tape, binder, pset, x, crate::encoders::AttnLayout::Global);
        let last = *outs.last().unwrap();
        let z = tape.slice_axis(last, 1, 1, kept.len() + 1);
        let z = tape.reshape(z, &[kept.len(), vit.cfg.dim]);
        // decode: narrow embedding, reinsert mask tokens, 2 blocks, pixels
        let z = dec.embed.forward(tape, binder, pset, z);
        let m = binder.bind(tape, pset, dec.mask_token);
        let full = mae_reinsert(tape, z, &plan, m)?;
        let pos = binder.bind(tape, pset, dec.pos);
        let full = tape.add(full, pos);
        let full3 = tape.reshape(full, &[1, t, dec.dim]);
        let decoded = dec
            .trunk
            .forward(tape, binder, pset, full3, crate::encoders::AttnLayout::Global);
        let decoded = *decoded.last().unwrap();
        let decoded = tape.reshape(decoded, &[t, dec.dim]);
        let y_hat = dec.head.forward(tape, binder, pset, decoded);
        let target = patches.index_axis(ndarray::Axis(0), 0).to_owned();
        let l = mae_loss(tape, y_hat, &target, &plan)?;
        acc = tape.add(acc, l);
    }
    Ok(tape.mul_scalar(acc, 1.0 / chunk.len() as f64))
}

fn view_batches(
    ds: &Dataset,
    chunk: &[usize],
    acfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array4<f64>, Array4<f64>) {
    let mut v1 = Vec::with_capacity(chunk.len());
    let mut v2 = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let pair = make_view_pair(&ds.samples[i].image, acfg, rng.gen());
        v1.push(pair.x1);
        v2.push(pair.x2);
    }
    (stack_images(&v1), stack_images(&v2))
}

fn online_embed(
    encoder: &Encoder,
    projector: &ProjectionMlp,
    predictor: Option<&ProjectionMlp>,
    pset: &mut ParamSet,
    tape: &mut Tape,
    binder: &mut Binder,
    batch: &Array4<f64>,
) -> Result<Var> {
    let f = global_rows(encoder, tape, binder, pset, batch)?;
    let z = projector.forward(tape, binder, pset, f, Mode::Train);
    Ok(match predictor {
        Some(p) => p.forward(tape, binder, pset, z, Mode::Train),
        None => z,
    })
}

/// Everything in the training split; used when a run needs no held-out data.
pub fn all_train_split(n: usize, seed: u64) -> SplitManifest {
    SplitManifest {
        train: (0..n).collect(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
        ratios: [1.0, 0.0, 0.0],
    }
}

fn pretrain_supervised(
    ds: &Dataset,
    arch: &ArchConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
    start: Instant,
) -> Result<(ParamSet, RunRecord)> {
    if ds.task != TaskKind::Classification {
        return Err(Error::Invalid(
            "supervised-proxy pretraining needs a classification dataset".into(),
        ));
    }
    let split = all_train_split(ds.samples.len(), tcfg.seed);
    let (model, mut record) = finetune(ds, &split, arch, tcfg, None, None)?;
    record.task = "pretrain-supervised".to_string();
    record.wall_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        let prov: BTreeMap<String, String> = [
            ("stage".to_string(), "pretrain".to_string()),
            ("algorithm".to_string(), "supervised".to_string()),
            ("seed".to_string(), tcfg.seed.to_string()),
        ]
        .into();
        write_checkpoint(
            &dir.join("pretrained.ckpt"),
            &model.pset,
            serde_json::to_value(arch)?,
            tcfg.seed,
            prov,
        )?;
        std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok((model.pset, record))
}
