//! Online training-time pre-processing: the per-task augmentation pipeline,
//! paired-view generation for self-supervised pretraining, and exact
//! mirroring of geometric ops onto targets.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoxPx, TaskKind, Target};
use crate::imageops::{self, Affine, Filter};

/// Tunable augmentation parameters (config namespace `augment.*`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Working resolution the resize step targets.
    pub side: usize,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    pub hue: [f64; 2],
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
    /// Affine translation limits as a fraction of the side.
    pub translate_frac: f64,
    pub scale: [f64; 2],
    pub shear_deg: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            side: 64,
            brightness: [0.4, 0.6],
            contrast: [0.5, 1.5],
            saturation: [0.75, 1.25],
            hue: [0.99, 1.01],
            blur_kernel: 25,
            blur_sigma: [0.001, 2.0],
            translate_frac: 28.0 / 224.0,
            scale: [0.5, 1.5],
            shear_deg: 22.5,
            mean: imageops::IMAGENET_MEAN,
            std: imageops::IMAGENET_STD,
        }
    }
}

/// One applied operation with its sampled parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransformOp {
    PadToSquare { orig_h: usize, orig_w: usize },
    Resize { from: (usize, usize), to: (usize, usize) },
    ColorJitter { brightness: f64, contrast: f64, saturation: f64, hue: f64 },
    GaussianBlur { sigma: f64 },
    Rot90,
    FlipH,
    FlipV,
    Rotate { degrees: f64 },
    AffineWarp { tx: f64, ty: f64, scale: f64, shear_deg: f64 },
    Normalize { mean: [f64; 3], std: [f64; 3] },
}

/// Ordered list of applied ops; replaying it reproduces the output exactly.
/// `input_dims` is the `(h, w)` of the source image, needed to mirror
/// geometric ops onto targets that carry no size of their own (boxes).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub input_dims: (usize, usize),
    pub ops: Vec<TransformOp>,
}

fn apply_op(img: &Array3<f64>, op: &TransformOp, cfg: &AugmentConfig) -> Array3<f64> {
    match op {
        TransformOp::PadToSquare { .. } => imageops::pad_to_square_rgb(img, 0.0),
        TransformOp::Resize { to, .. } => {
            imageops::resample_rgb(img, to.0, to.1, Filter::BicubicAa)
        }
        TransformOp::ColorJitter { brightness, contrast, saturation, hue } => {
            imageops::color_jitter(img, *brightness, *contrast, *saturation, *hue)
        }
        TransformOp::GaussianBlur { sigma } => {
            imageops::gaussian_blur_rgb(img, *sigma, cfg.blur_kernel)
        }
        TransformOp::Rot90 => imageops::rot90_rgb(img),
        TransformOp::FlipH => imageops::flip_h_rgb(img),
        TransformOp::FlipV => imageops::flip_v_rgb(img),
        TransformOp::Rotate { degrees } => {
            let (_, h, w) = img.dim();
            let m = imageops::affine_about_center(h, w, *degrees, 1.0, 0.0, 0.0, 0.0);
            imageops::warp_rgb(img, &m, 0.0)
        }
        TransformOp::AffineWarp { tx, ty, scale, shear_deg } => {
            let (_, h, w) = img.dim();
            let m = imageops::affine_about_center(h, w, 0.0, *scale, *shear_deg, *tx, *ty);
            imageops::warp_rgb(img, &m, 0.0)
        }
        TransformOp::Normalize { mean, std } => imageops::normalize(img, mean, std),
    }
}

/// Replay a record on an image.
pub fn replay(img: &Array3<f64>, rec: &TransformRecord, cfg: &AugmentConfig) -> Array3<f64> {
    let mut out = img.clone();
    for op in &rec.ops {
        out = apply_op(&out, op, cfg);
    }
    out
}

fn sample_ops(
    task: TaskKind,
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> TransformRecord {
    let mut ops = Vec::new();
    let mut cur = (h, w);
    if task == TaskKind::Depth {
        ops.push(TransformOp::PadToSquare { orig_h: h, orig_w: w });
        let side = h.max(w);
        cur = (side, side);
    }
    if task != TaskKind::Detection {
        ops.push(TransformOp::Resize { from: cur, to: (cfg.side, cfg.side) });
        cur = (cfg.side, cfg.side);
    }
    ops.push(TransformOp::ColorJitter {
        brightness: rng.gen_range(cfg.brightness[0]..cfg.brightness[1]),
        contrast: rng.gen_range(cfg.contrast[0]..cfg.contrast[1]),
        saturation: rng.gen_range(cfg.saturation[0]..cfg.saturation[1]),
        hue: rng.gen_range(cfg.hue[0]..cfg.hue[1]),
    });
    if task != TaskKind::Depth {
        ops.push(TransformOp::GaussianBlur {
            sigma: rng.gen_range(cfg.blur_sigma[0]..cfg.blur_sigma[1]),
        });
    }
    if task == TaskKind::Detection && rng.gen_bool(0.5) {
        ops.push(TransformOp::Rot90);
    }
    if rng.gen_bool(0.5) {
        ops.push(TransformOp::FlipH);
    }
    if rng.gen_bool(0.5) {
        ops.push(TransformOp::FlipV);
    }
    if matches!(task, TaskKind::Classification | TaskKind::Segmentation) {
        ops.push(TransformOp::Rotate {
            degrees: rng.gen_range(-180.0..180.0),
        });
    }
    if task == TaskKind::Segmentation {
        let t = cfg.translate_frac * cur.1.max(cur.0) as f64;
        ops.push(TransformOp::AffineWarp {
            tx: rng.gen_range(-t..t),
            ty: rng.gen_range(-t..t),
            scale: rng.gen_range(cfg.scale[0]..cfg.scale[1]),
            shear_deg: rng.gen_range(-cfg.shear_deg..cfg.shear_deg),
        });
    }
    ops.push(TransformOp::Normalize { mean: cfg.mean, std: cfg.std });
    TransformRecord { input_dims: (h, w), ops }
}

/// Sample and apply the task's training pipeline. Deterministic in the seed.
pub fn preprocess_train(
    img: &Array3<f64>,
    task: TaskKind,
    cfg: &AugmentConfig,
    seed: u64,
) -> (Array3<f64>, TransformRecord) {
    let (_, h, w) = img.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = sample_ops(task, h, w, cfg, &mut rng);
    (replay(img, &rec, cfg), rec)
}

/// Deterministic evaluation pipeline: the same resizing (and, for depth,
/// padding) plus normalization, with every stochastic op skipped.
pub fn preprocess_eval(
    img: &Array3<f64>,
    task: TaskKind,
    cfg: &AugmentConfig,
) -> (Array3<f64>, TransformRecord) {
    let (_, h, w) = img.dim();
    let mut ops = Vec::new();
    let mut cur = (h, w);
    if task == TaskKind::Depth {
        ops.push(TransformOp::PadToSquare { orig_h: h, orig_w: w });
        let side = h.max(w);
        cur = (side, side);
    }
    if task != TaskKind::Detection {
        ops.push(TransformOp::Resize { from: cur, to: (cfg.side, cfg.side) });
    }
    ops.push(TransformOp::Normalize { mean: cfg.mean, std: cfg.std });
    let rec = TransformRecord { input_dims: (h, w), ops };
    (replay(img, &rec, cfg), rec)
}

/// Two independently augmented views of one image.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub x1: Array3<f64>,
    pub x2: Array3<f64>,
    pub rec1: TransformRecord,
    pub rec2: TransformRecord,
}

/// Two independent draws of the classification-column pipeline.
pub fn make_view_pair(img: &Array3<f64>, cfg: &AugmentConfig, seed: u64) -> ViewPair {
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let s1 = seeder.gen::<u64>();
    let s2 = seeder.gen::<u64>();
    let (x1, rec1) = preprocess_train(img, TaskKind::Classification, cfg, s1);
    let (x2, rec2) = preprocess_train(img, TaskKind::Classification, cfg, s2);
    ViewPair { x1, x2, rec1, rec2 }
}

/// Target after mirroring a record; boxes pushed fully outside are dropped
/// and reported.
#[derive(Debug, Clone)]
pub struct TransformedTarget {
    pub target: Target,
    pub dropped_boxes: usize,
}

fn forward_matrix(op: &TransformOp, h: usize, w: usize) -> Option<Affine> {
    match op {
        TransformOp::Rotate { degrees } => {
            Some(imageops::affine_about_center(h, w, *degrees, 1.0, 0.0, 0.0, 0.0))
        }
        TransformOp::AffineWarp { tx, ty, scale, shear_deg } => {
            Some(imageops::affine_about_center(h, w, 0.0, *scale, *shear_deg, *tx, *ty))
        }
        _ => None,
    }
}

fn transform_boxes(
    boxes: &[BoxPx],
    op: &TransformOp,
    h: usize,
    w: usize,
    dropped: &mut usize,
) -> Vec<BoxPx> {
    let map_corners = |b: &BoxPx, f: &dyn Fn(f64, f64) -> (f64, f64)| -> BoxPx {
        let pts = [
            f(b.x_min, b.y_min),
            f(b.x_max, b.y_min),
            f(b.x_min, b.y_max),
            f(b.x_max, b.y_max),
        ];
        BoxPx {
            x_min: pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
            y_min: pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
            x_max: pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
            y_max: pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
        }
    };
    let (nh, nw) = out_dims(op, h, w);
    let mapped: Vec<BoxPx> = match op {
        TransformOp::PadToSquare { .. } | TransformOp::Normalize { .. }
        | TransformOp::ColorJitter { .. } | TransformOp::GaussianBlur { .. } => boxes.to_vec(),
        TransformOp::Resize { from, to } => {
            let sy = to.0 as f64 / from.0 as f64;
            let sx = to.1 as f64 / from.1 as f64;
            boxes
                .iter()
                .map(|b| map_corners(b, &|x, y| (x * sx, y * sy)))
                .collect()
        }
        // pixel-index remaps act on box coordinates in continuous form
        TransformOp::Rot90 => boxes
            .iter()
            .map(|b| map_corners(b, &|x, y| (h as f64 - y, x)))
            .collect(),
        TransformOp::FlipH => boxes
            .iter()
            .map(|b| map_corners(b, &|x, y| (w as f64 - x, y)))
            .collect(),
        TransformOp::FlipV => boxes
            .iter()
            .map(|b| map_corners(b, &|x, y| (x, h as f64 - y)))
            .collect(),
        TransformOp::Rotate { .. } | TransformOp::AffineWarp { .. } => {
            let m = forward_matrix(op, h, w).unwrap();
            boxes
                .iter()
                .map(|b| map_corners(b, &|x, y| imageops::apply_affine(&m, x, y)))
                .collect()
        }
    };
    mapped
        .into_iter()
        .filter_map(|b| {
            let clipped = BoxPx {
                x_min: b.x_min.clamp(0.0, nw as f64),
                y_min: b.y_min.clamp(0.0, nh as f64),
                x_max: b.x_max.clamp(0.0, nw as f64),
                y_max: b.y_max.clamp(0.0, nh as f64),
            };
            if clipped.is_valid() {
                Some(clipped)
            } else {
                *dropped += 1;
                None
            }
        })
        .collect()
}

fn out_dims(op: &TransformOp, h: usize, w: usize) -> (usize, usize) {
    match op {
        TransformOp::PadToSquare { .. } => (h.max(w), h.max(w)),
        TransformOp::Resize { to, .. } => *to,
        TransformOp::Rot90 => (w, h),
        _ => (h, w),
    }
}

fn transform_plane(plane: &Array2<f64>, op: &TransformOp, filter: Filter) -> Array2<f64> {
    let (h, w) = plane.dim();
    match op {
        TransformOp::PadToSquare { .. } => imageops::pad_to_square_plane(plane, 0.0),
        TransformOp::Resize { to, .. } => imageops::resample_plane(plane, to.0, to.1, filter),
        TransformOp::Rot90 => imageops::rot90_plane(plane),
        TransformOp::FlipH => imageops::flip_h_plane(plane),
        TransformOp::FlipV => imageops::flip_v_plane(plane),
        TransformOp::Rotate { .. } | TransformOp::AffineWarp { .. } => {
            let m = forward_matrix(op, h, w).unwrap();
            imageops::warp_plane(plane, &m, filter, 0.0)
        }
        TransformOp::Normalize { .. }
        | TransformOp::ColorJitter { .. }
        | TransformOp::GaussianBlur { .. } => plane.clone(),
    }
}

/// Mirror the geometric ops of a record onto a target; photometric ops are
/// skipped. Masks use nearest lookup, depth maps bilinear.
pub fn apply_to_targets(rec: &TransformRecord, target: &Target) -> TransformedTarget {
    let mut dropped = 0usize;
    let mut cur = target.clone();
    let (mut h, mut w) = rec.input_dims;
    for op in &rec.ops {
        cur = match cur {
            Target::Class(c) => Target::Class(c),
            Target::Boxes(boxes) => {
                Target::Boxes(transform_boxes(&boxes, op, h, w, &mut dropped))
            }
            Target::Mask(mask) => {
                let plane = mask.mapv(|b| if b { 1.0 } else { 0.0 });
                Target::Mask(transform_plane(&plane, op, Filter::Nearest).mapv(|v| v > 0.5))
            }
            Target::Depth { depth, lens } => {
                let lens_plane = lens.mapv(|b| if b { 1.0 } else { 0.0 });
                Target::Depth {
                    depth: transform_plane(&depth, op, Filter::Bilinear),
                    lens: transform_plane(&lens_plane, op, Filter::Nearest).mapv(|v| v > 0.5),
                }
            }
        };
        let next = out_dims(op, h, w);
        h = next.0;
        w = next.1;
    }
    TransformedTarget { target: cur, dropped_boxes: dropped }
}
