//! Evaluation metrics: macro-averaged classification scores, detection
//! average precision over an IoU threshold range, per-image segmentation
//! overlap, and scale/shift-aligned depth errors in centimetres.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::BoxPx;
use crate::heads::{ssi_align, SsiAlignment};
use crate::imageops::{resample_plane, Filter};
use crate::{Error, Result};

/// Stabilizer added to every metric denominator.
pub const EPS_METRIC: f64 = 1e-8;
/// Physical depth of field: predictions in `[0, 1]` map to `[0, 10]` cm.
pub const DEPTH_RANGE_CM: f64 = 10.0;

/// Per-class true/false positive and false negative counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub total: usize,
}

/// Tally predictions against labels over a fixed class count.
pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "confusion: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = ConfusionCounts {
        tp: vec![0; n_classes],
        fp: vec![0; n_classes],
        fn_: vec![0; n_classes],
        total: preds.len(),
    };
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::Invalid(format!(
                "class index out of range: prediction {p}, label {y}, {n_classes} classes"
            )));
        }
        if p == y {
            counts.tp[p] += 1;
        } else {
            counts.fp[p] += 1;
            counts.fn_[y] += 1;
        }
    }
    Ok(counts)
}

/// Accuracy plus macro-averaged precision, recall, and F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub m_precision: f64,
    pub m_recall: f64,
    pub m_f1: f64,
    pub per_class_f1: Vec<f64>,
}

/// Per-class scores use the `EPS_METRIC` stabilizer in each denominator,
/// then average uniformly over classes.
pub fn classification_metrics(counts: &ConfusionCounts) -> ClassificationMetrics {
    let c = counts.tp.len();
    let mut precs = Vec::with_capacity(c);
    let mut recs = Vec::with_capacity(c);
    let mut f1s = Vec::with_capacity(c);
    for k in 0..c {
        let tp = counts.tp[k] as f64;
        let p = tp / (tp + counts.fp[k] as f64 + EPS_METRIC);
        let r = tp / (tp + counts.fn_[k] as f64 + EPS_METRIC);
        precs.push(p);
        recs.push(r);
        f1s.push(2.0 * p * r / (p + r + EPS_METRIC));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ClassificationMetrics {
        accuracy: counts.tp.iter().sum::<usize>() as f64 / counts.total as f64,
        m_precision: mean(&precs),
        m_recall: mean(&recs),
        m_f1: mean(&f1s),
        per_class_f1: f1s,
    }
}

/// Intersection over union of two boxes; degenerate boxes are rejected.
pub fn box_iou(a: &BoxPx, b: &BoxPx) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::DegenerateBox(format!("IoU of {a:?} vs {b:?}")));
    }
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    Ok(inter / (a.area() + b.area() - inter))
}

/// A scored box prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub box_px: BoxPx,
    pub score: f64,
}

/// How a detection picks among several ground-truth boxes above the IoU
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchRule {
    /// Match the unclaimed ground-truth box with the highest overlap.
    #[default]
    HighestIou,
    /// Match the first unclaimed ground-truth box in list order.
    FirstListed,
}

/// One image's predictions and ground truth.
#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub detections: Vec<Detection>,
    pub truths: Vec<BoxPx>,
}

/// Greedy one-to-one matching in descending confidence (ties keep input
/// order). A detection is a true positive when its IoU with an unclaimed
/// ground-truth box strictly exceeds the threshold. Returns one flag per
/// detection in confidence order.
pub fn match_detections(
    scene: &Scene,
    iou_thresh: f64,
    rule: MatchRule,
) -> Result<Vec<bool>> {
    let mut order: Vec<usize> = (0..scene.detections.len()).collect();
    order.sort_by(|&a, &b| {
        scene.detections[b]
            .score
            .partial_cmp(&scene.detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; scene.truths.len()];
    let mut flags = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &scene.detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in scene.truths.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let iou = box_iou(&det.box_px, gt)?;
            if iou > iou_thresh {
                match rule {
                    MatchRule::FirstListed => {
                        best = Some((gi, iou));
                        break;
                    }
                    MatchRule::HighestIou => {
                        if best.map_or(true, |(_, b)| iou > b) {
                            best = Some((gi, iou));
                        }
                    }
                }
            }
        }
        if let Some((gi, _)) = best {
            claimed[gi] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    Ok(flags)
}

/// Area under the interpolated precision-recall curve: precision at each
/// recall is the maximum achieved at that recall or beyond, and zero past
/// the highest recall reached. `flags` are true-positive markers in
/// descending confidence order, pooled over the dataset.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let n = flags.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // right-to-left envelope; precision past the last point is zero
    let mut env = precision.clone();
    for k in (0..n - 1).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..n {
        ap += (recall[k] - prev_r) * env[k];
        prev_r = recall[k];
    }
    Ok(ap)
}

/// Pool every scene's detections by confidence, match each within its own
/// image, and compute one dataset-level AP at the threshold.
pub fn dataset_ap(scenes: &[Scene], iou_thresh: f64, rule: MatchRule) -> Result<f64> {
    let n_gt: usize = scenes.iter().map(|s| s.truths.len()).sum();
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    // (score, original scene index, original detection index) for a stable
    // global confidence order
    let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
    let mut per_scene_flags: Vec<Vec<bool>> = Vec::with_capacity(scenes.len());
    for (si, scene) in scenes.iter().enumerate() {
        per_scene_flags.push(match_detections(scene, iou_thresh, rule)?);
        let mut order: Vec<usize> = (0..scene.detections.len()).collect();
        order.sort_by(|&a, &b| {
            scene.detections[b]
                .score
                .partial_cmp(&scene.detections[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        for (rank, &di) in order.iter().enumerate() {
            pooled.push((scene.detections[di].score, si, rank));
        }
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<bool> = pooled
        .iter()
        .map(|&(_, si, rank)| per_scene_flags[si][rank])
        .collect();
    average_precision(&flags, n_gt)
}

/// The ten IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.50 + 0.05 * i as f64).collect()
}

/// Mean of `dataset_ap` over `iou_thresholds()`.
pub fn ap_range(scenes: &[Scene], rule: MatchRule) -> Result<f64> {
    let ts = iou_thresholds();
    let mut sum = 0.0;
    for t in &ts {
        sum += dataset_ap(scenes, *t, rule)?;
    }
    Ok(sum / ts.len() as f64)
}

/// Mean per-image Dice and IoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub m_dice: f64,
    pub m_iou: f64,
}

/// Each working-resolution probability map is resized bilinearly to its
/// ground truth's resolution, binarized at 0.5, and scored per image.
pub fn segmentation_metrics(
    probs: &[Array2<f64>],
    truths: &[Array2<bool>],
) -> Result<SegMetrics> {
    if probs.len() != truths.len() {
        return Err(Error::Shape(format!(
            "segmentation: {} predictions vs {} truths",
            probs.len(),
            truths.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut dice_sum = 0.0;
    let mut iou_sum = 0.0;
    for (p, g) in probs.iter().zip(truths) {
        let (gh, gw) = g.dim();
        let up = resample_plane(p, gh, gw, Filter::Bilinear);
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for (pv, gv) in up.iter().zip(g.iter()) {
            let pb = if *pv >= 0.5 { 1.0 } else { 0.0 };
            let gb = if *gv { 1.0 } else { 0.0 };
            inter += pb * gb;
            psum += pb;
            gsum += gb;
        }
        dice_sum += 2.0 * inter / (psum + gsum + EPS_METRIC);
        iou_sum += inter / (psum + gsum - inter + EPS_METRIC);
    }
    let n = probs.len() as f64;
    Ok(SegMetrics {
        m_dice: dice_sum / n,
        m_iou: iou_sum / n,
    })
}

/// Map a working-resolution depth prediction back to the original frame in
/// centimetres: apply the scale/shift, resize bilinearly to the square side
/// `max(h, w)`, crop the top-left `h × w` window, clip to `[0, 1]`, zero
/// everything off the lens, and scale by the physical range.
pub fn depth_postprocess(
    pred: &Array2<f64>,
    align: SsiAlignment,
    orig_h: usize,
    orig_w: usize,
    lens: &Array2<bool>,
) -> Result<Array2<f64>> {
    if lens.dim() != (orig_h, orig_w) {
        return Err(Error::Shape("depth postprocess: lens dimension mismatch".into()));
    }
    let aligned = pred.mapv(|v| align.s * v + align.t);
    let side = orig_h.max(orig_w);
    let full = resample_plane(&aligned, side, side, Filter::Bilinear);
    Ok(Array2::from_shape_fn((orig_h, orig_w), |(y, x)| {
        if lens[[y, x]] {
            full[[y, x]].clamp(0.0, 1.0) * DEPTH_RANGE_CM
        } else {
            0.0
        }
    }))
}

/// Mean per-image depth errors in centimetres over lens pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    /// Mean of per-image root-mean-square error.
    pub m_rmse: f64,
    /// Mean of per-image median relative absolute error.
    pub m_abs_rel: f64,
    /// Mean of per-image mean absolute error.
    pub m_mae: f64,
    /// Lens pixels with a zero target, excluded from the relative error.
    pub skipped_zero_targets: usize,
}

/// Score post-processed predictions against ground truth; both in
/// centimetres on the original frame, compared over lens pixels only.
pub fn depth_metrics(
    preds: &[Array2<f64>],
    truths: &[Array2<f64>],
    lenses: &[Array2<bool>],
) -> Result<DepthMetrics> {
    if preds.len() != truths.len() || preds.len() != lenses.len() {
        return Err(Error::Shape("depth metrics: image count mismatch".into()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rmse_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut mae_sum = 0.0;
    let mut skipped = 0usize;
    for ((p, y), l) in preds.iter().zip(truths).zip(lenses) {
        if p.dim() != y.dim() || p.dim() != l.dim() {
            return Err(Error::Shape("depth metrics: image dimension mismatch".into()));
        }
        let mut sq = 0.0;
        let mut abs = 0.0;
        let mut n = 0.0;
        let mut rels: Vec<f64> = Vec::new();
        for ((pv, yv), lv) in p.iter().zip(y.iter()).zip(l.iter()) {
            if !lv {
                continue;
            }
            let d = pv - yv;
            sq += d * d;
            abs += d.abs();
            n += 1.0;
            if *yv == 0.0 {
                skipped += 1;
            } else {
                rels.push(d.abs() / yv);
            }
        }
        if n == 0.0 {
            return Err(Error::Invalid("depth metrics: empty lens mask".into()));
        }
        rmse_sum += (sq / n).sqrt();
        mae_sum += abs / n;
        rel_sum += median(&mut rels);
    }
    let ni = preds.len() as f64;
    Ok(DepthMetrics {
        m_rmse: rmse_sum / ni,
        m_abs_rel: rel_sum / ni,
        m_mae: mae_sum / ni,
        skipped_zero_targets: skipped,
    })
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean squared residual after optimal scale/shift alignment over lens
/// pixels; the validation-time depth score.
pub fn ssi_mse(pred: &Array2<f64>, target: &Array2<f64>, lens: &Array2<f64>) -> Result<f64> {
    let a = ssi_align(pred, target, lens)?;
    let mut sq = 0.0;
    let mut n = 0.0;
    for ((p, y), l) in pred.iter().zip(target.iter()).zip(lens.iter()) {
        if *l > 0.5 {
            let r = a.s * p + a.t - y;
            sq += r * r;
            n += 1.0;
        }
    }
    Ok(sq / n)
}
