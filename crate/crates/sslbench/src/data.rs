//! Dataset manifests, reproducible splits, class statistics, and the
//! synthetic dataset generator.
//!
//! On-disk layout: a JSON manifest next to `images/` (8-bit RGB PNG) and,
//! depending on the task, `boxes/` (JSON box lists), `masks/` (0/255 PNG),
//! or `depth/` + `lens/` (16-bit grayscale PNG and 0/255 PNG).

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::imageops;
use crate::{Error, Result};

/// Task family of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Detection,
    Segmentation,
    Depth,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Detection => "detection",
            TaskKind::Segmentation => "segmentation",
            TaskKind::Depth => "depth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "detection" => Ok(TaskKind::Detection),
            "segmentation" => Ok(TaskKind::Segmentation),
            "depth" => Ok(TaskKind::Depth),
            other => Err(Error::Invalid(format!("unsupported task kind: {other}"))),
        }
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxPx {
    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_max > self.x_min && self.y_max > self.y_min
    }
}

/// In-memory target of one sample.
#[derive(Debug, Clone)]
pub enum Target {
    Class(usize),
    Boxes(Vec<BoxPx>),
    Mask(Array2<bool>),
    Depth {
        depth: Array2<f64>,
        lens: Array2<bool>,
    },
}

/// One image with its target, fully loaded.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f64>,
    pub target: Target,
}

/// A loaded dataset: consistent task kind across samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskKind,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Serialized manifest schema.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    task_kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    records: Vec<RecordFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordFile {
    id: String,
    image: String,
    target: TargetRef,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TargetRef {
    Class(usize),
    Boxes(String),
    Mask(String),
    Depth { depth: String, lens: String },
}

/// Record lists referencing `Dataset::samples` by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Per-class weights `N_D / (N_i · N_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

/// Deterministic shuffle + floor-based split sizes; remainder goes to train.
pub fn split_dataset(n_records: usize, ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if n_records == 0 {
        return Err(Error::EmptyDataset);
    }
    if ratios.iter().any(|&r| r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!("{ratios:?}")));
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_val = (ratios[1] * n_records as f64).floor() as usize;
    let n_test = (ratios[2] * n_records as f64).floor() as usize;
    let n_train = n_records - n_val - n_test;
    Ok(SplitManifest {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
        seed,
        ratios,
    })
}

/// Compute weights over the entire dataset's class counts.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_d: usize = counts.iter().sum();
    let n_c = counts.len();
    let mut weights = Vec::with_capacity(n_c);
    for (i, &n_i) in counts.iter().enumerate() {
        if n_i == 0 {
            return Err(Error::EmptyClass(format!("class {i}")));
        }
        weights.push(n_d as f64 / (n_i as f64 * n_c as f64));
    }
    Ok(ClassWeights { weights })
}

/// Count instances per class in a classification dataset.
pub fn count_classes(ds: &Dataset) -> Result<Vec<usize>> {
    let n_c = ds.class_names.len();
    let mut counts = vec![0usize; n_c];
    for s in &ds.samples {
        match &s.target {
            Target::Class(c) if *c < n_c => counts[*c] += 1,
            Target::Class(c) => {
                return Err(Error::Invalid(format!("class index {c} out of range")))
            }
            _ => return Err(Error::Invalid("not a classification dataset".into())),
        }
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Parameters of the synthetic generator.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n: usize,
    pub task: TaskKind,
    pub classes: usize,
    pub side: usize,
}

impl SynthSpec {
    pub fn new(n: usize, task: TaskKind) -> Self {
        Self {
            n,
            task,
            classes: 4,
            side: 64,
        }
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
    texture: usize,
}

fn lesion_mask(l: &Lesion, side: usize) -> Array2<bool> {
    let (s, c) = l.angle.sin_cos();
    Array2::from_shape_fn((side, side), |(y, x)| {
        let dx = x as f64 - l.cx;
        let dy = y as f64 - l.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / l.ax).powi(2) + (v / l.ay).powi(2) <= 1.0
    })
}

fn texture_color(texture: usize, u: f64, v: f64) -> [f64; 3] {
    // each texture id: a distinct base colour plus a distinct stripe pattern
    let bases = [
        [0.85, 0.35, 0.30],
        [0.35, 0.75, 0.35],
        [0.30, 0.45, 0.85],
        [0.85, 0.75, 0.25],
        [0.75, 0.35, 0.80],
        [0.30, 0.80, 0.80],
        [0.90, 0.55, 0.30],
        [0.55, 0.55, 0.90],
    ];
    let base = bases[texture % bases.len()];
    let freq = 0.25 + 0.15 * (texture % 4) as f64;
    let stripe = 0.15 * ((u * freq + v * freq * 0.5).sin());
    [
        (base[0] + stripe).clamp(0.0, 1.0),
        (base[1] + stripe).clamp(0.0, 1.0),
        (base[2] + stripe).clamp(0.0, 1.0),
    ]
}

fn smooth_background(rng: &mut ChaCha8Rng, side: usize) -> Array3<f64> {
    // coarse random grid upsampled bilinearly = smooth low-frequency field
    let g = 5;
    let base: [f64; 3] = [
        rng.gen_range(0.55..0.8),
        rng.gen_range(0.35..0.55),
        rng.gen_range(0.3..0.45),
    ];
    let mut out = Array3::<f64>::zeros((3, side, side));
    for ch in 0..3 {
        let grid = Array2::from_shape_fn((g, g), |_| rng.gen_range(-0.08..0.08));
        let field = imageops::resample_plane(&grid, side, side, imageops::Filter::Bilinear);
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&field.mapv(|v| (base[ch] + v).clamp(0.0, 1.0)));
    }
    out
}

fn paint_lesion(img: &mut Array3<f64>, l: &Lesion, mask: &Array2<bool>) {
    let side = mask.dim().0;
    for y in 0..side {
        for x in 0..side {
            if mask[[y, x]] {
                let col = texture_color(l.texture, x as f64 - l.cx, y as f64 - l.cy);
                for ch in 0..3 {
                    img[[ch, y, x]] = col[ch];
                }
            }
        }
    }
}

fn tight_bbox(mask: &Array2<bool>) -> Option<BoxPx> {
    let (h, w) = mask.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if any {
        Some(BoxPx {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: (x1 + 1) as f64,
            y_max: (y1 + 1) as f64,
        })
    } else {
        None
    }
}

fn boxes_overlap(a: &BoxPx, b: &BoxPx) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

fn sample_lesion(rng: &mut ChaCha8Rng, side: usize, classes: usize) -> Lesion {
    let s = side as f64;
    Lesion {
        cx: rng.gen_range(0.2 * s..0.8 * s),
        cy: rng.gen_range(0.2 * s..0.8 * s),
        ax: rng.gen_range(0.08 * s..0.18 * s),
        ay: rng.gen_range(0.08 * s..0.18 * s),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        texture: rng.gen_range(0..classes),
    }
}

/// Circular lens field-of-view; corners fall outside.
pub fn lens_mask(side: usize) -> Array2<bool> {
    let c = (side as f64 - 1.0) / 2.0;
    let r = 0.52 * side as f64;
    Array2::from_shape_fn((side, side), |(y, x)| {
        (x as f64 - c).powi(2) + (y as f64 - c).powi(2) <= r * r
    })
}

fn radial_depth(rng: &mut ChaCha8Rng, side: usize) -> Array2<f64> {
    // tube-like geometry: depth grows toward a randomly placed lumen centre,
    // with a mild angular modulation so scale/shift alignment is non-trivial
    let s = side as f64;
    let cx = rng.gen_range(0.35 * s..0.65 * s);
    let cy = rng.gen_range(0.35 * s..0.65 * s);
    let falloff = rng.gen_range(0.35 * s..0.55 * s);
    let amp = rng.gen_range(0.03..0.08);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    Array2::from_shape_fn((side, side), |(y, x)| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let r = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        let d = (-(r / falloff).powi(2)).exp() + amp * (2.0 * theta + phase).sin();
        (0.9 * d.clamp(0.0, 1.0) + 0.05).clamp(0.0, 1.0)
    })
}

/// Generate a fully in-memory synthetic dataset, deterministic under seed.
pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.n == 0 || spec.classes == 0 || spec.side < 8 {
        return Err(Error::Invalid("synthetic spec sizes must be >= 1 (side >= 8)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut image = smooth_background(&mut rng, spec.side);
        let target = match spec.task {
            TaskKind::Classification => {
                // balanced classes round-robin; texture determines the label
                let mut l = sample_lesion(&mut rng, spec.side, spec.classes);
                l.texture = i % spec.classes;
                let mask = lesion_mask(&l, spec.side);
                paint_lesion(&mut image, &l, &mask);
                Target::Class(l.texture)
            }
            TaskKind::Segmentation | TaskKind::Detection => {
                let count = rng.gen_range(1..=3usize);
                let mut placed: Vec<(Lesion, Array2<bool>, BoxPx)> = Vec::new();
                let mut attempts = 0;
                while placed.len() < count && attempts < 50 {
                    attempts += 1;
                    let l = sample_lesion(&mut rng, spec.side, spec.classes);
                    let mask = lesion_mask(&l, spec.side);
                    let Some(bb) = tight_bbox(&mask) else { continue };
                    if placed.iter().all(|(_, _, other)| !boxes_overlap(&bb, other)) {
                        placed.push((l, mask, bb));
                    }
                }
                let mut union = Array2::<bool>::from_elem((spec.side, spec.side), false);
                let mut boxes = Vec::new();
                for (l, mask, bb) in &placed {
                    paint_lesion(&mut image, l, mask);
                    union.zip_mut_with(mask, |u, &m| *u |= m);
                    boxes.push(*bb);
                }
                if spec.task == TaskKind::Segmentation {
                    Target::Mask(union)
                } else {
                    Target::Boxes(boxes)
                }
            }
            TaskKind::Depth => Target::Depth {
                depth: radial_depth(&mut rng, spec.side),
                lens: lens_mask(spec.side),
            },
        };
        samples.push(Sample {
            id: format!("synth_{i:05}"),
            image,
            target,
        });
    }
    let class_names = (0..spec.classes).map(|c| format!("texture_{c}")).collect();
    Ok(Dataset {
        task: spec.task,
        class_names,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Disk round trip
// ---------------------------------------------------------------------------

/// Write a dataset under `dir` and return the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let image_rel = format!("images/{}.png", s.id);
        imageops::write_rgb_png(&dir.join(&image_rel), &s.image)?;
        let target = match &s.target {
            Target::Class(c) => TargetRef::Class(*c),
            Target::Boxes(boxes) => {
                std::fs::create_dir_all(dir.join("boxes"))?;
                let rel = format!("boxes/{}.json", s.id);
                let raw: Vec<[f64; 4]> = boxes
                    .iter()
                    .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
                    .collect();
                std::fs::write(dir.join(&rel), serde_json::to_string(&raw)?)?;
                TargetRef::Boxes(rel)
            }
            Target::Mask(mask) => {
                std::fs::create_dir_all(dir.join("masks"))?;
                let rel = format!("masks/{}.png", s.id);
                imageops::write_mask_png(&dir.join(&rel), mask)?;
                TargetRef::Mask(rel)
            }
            Target::Depth { depth, lens } => {
                std::fs::create_dir_all(dir.join("depth"))?;
                std::fs::create_dir_all(dir.join("lens"))?;
                let drel = format!("depth/{}.png", s.id);
                let lrel = format!("lens/{}.png", s.id);
                imageops::write_gray16_png(&dir.join(&drel), depth)?;
                imageops::write_mask_png(&dir.join(&lrel), lens)?;
                TargetRef::Depth {
                    depth: drel,
                    lens: lrel,
                }
            }
        };
        records.push(RecordFile {
            id: s.id.clone(),
            image: image_rel,
            target,
            split: None,
        });
    }
    let mf = ManifestFile {
        version: 1,
        task_kind: ds.task.as_str().to_string(),
        class_names: if ds.task == TaskKind::Classification {
            Some(ds.class_names.clone())
        } else {
            None
        },
        records,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&mf)?)?;
    Ok(path)
}

/// Load a dataset from its manifest, resolving all target references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Invalid("manifest has no parent directory".into()))?;
    let mf: ManifestFile = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let task = TaskKind::parse(&mf.task_kind)?;
    let class_names = mf.class_names.clone().unwrap_or_default();
    let n_c = class_names.len();
    let mut ids = BTreeSet::new();
    let mut samples = Vec::with_capacity(mf.records.len());
    for r in &mf.records {
        if !ids.insert(r.id.clone()) {
            return Err(Error::Invalid(format!("duplicate record id {}", r.id)));
        }
        let image = imageops::read_rgb_png(&dir.join(&r.image))?;
        let target = match &r.target {
            TargetRef::Class(c) => {
                if task != TaskKind::Classification || (n_c > 0 && *c >= n_c) {
                    return Err(Error::Invalid(format!(
                        "record {}: class index {c} invalid for task {}",
                        r.id,
                        task.as_str()
                    )));
                }
                Target::Class(*c)
            }
            TargetRef::Boxes(rel) => {
                let raw: Vec<[f64; 4]> =
                    serde_json::from_str(&std::fs::read_to_string(dir.join(rel))?)?;
                let boxes: Vec<BoxPx> = raw
                    .iter()
                    .map(|b| BoxPx {
                        x_min: b[0],
                        y_min: b[1],
                        x_max: b[2],
                        y_max: b[3],
                    })
                    .collect();
                for b in &boxes {
                    if !b.is_valid() {
                        return Err(Error::DegenerateBox(format!("record {}", r.id)));
                    }
                }
                Target::Boxes(boxes)
            }
            TargetRef::Mask(rel) => Target::Mask(imageops::read_mask_png(&dir.join(rel))?),
            TargetRef::Depth { depth, lens } => Target::Depth {
                depth: imageops::read_gray16_png(&dir.join(depth))?,
                lens: imageops::read_mask_png(&dir.join(lens))?,
            },
        };
        samples.push(Sample {
            id: r.id.clone(),
            image,
            target,
        });
    }
    Ok(Dataset {
        task,
        class_names,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_floor_rule() {
        let s = split_dataset(10, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_dataset(1000, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
        // floor sends the whole remainder to train
        let s = split_dataset(7, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 0, 0));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let a = split_dataset(53, [0.6, 0.2, 0.2], 99).unwrap();
        let b = split_dataset(53, [0.6, 0.2, 0.2], 99).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(matches!(
            split_dataset(0, [0.8, 0.1, 0.1], 0),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            split_dataset(10, [0.8, 0.1, 0.2], 0),
            Err(Error::InvalidRatios(_))
        ));
    }

    #[test]
    fn class_weights_match_hand_computation() {
        // anatomical landmark counts: six classes totalling 4104
        let counts = [1009, 9, 391, 999, 764, 932];
        let w = class_weights(&counts).unwrap();
        assert!((w.weights[0] - 4104.0 / (1009.0 * 6.0)).abs() < 1e-12);
        assert!((w.weights[0] - 0.6779).abs() < 1e-4);
        assert!((w.weights[1] - 76.0).abs() < 1e-12);
        // weighted mass returns the dataset size
        let mass: f64 = counts
            .iter()
            .zip(&w.weights)
            .map(|(&n, &wt)| n as f64 * wt)
            .sum();
        assert!((mass - 4104.0).abs() / 4104.0 < 1e-6);
    }

    #[test]
    fn class_weights_balanced_is_unit() {
        let w = class_weights(&[10, 10]).unwrap();
        assert_eq!(w.weights, vec![1.0, 1.0]);
        assert!(matches!(
            class_weights(&[5, 0]),
            Err(Error::EmptyClass(_))
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SynthSpec::new(6, TaskKind::Segmentation);
        let a = generate_synthetic_dataset(&spec, 1).unwrap();
        let b = generate_synthetic_dataset(&spec, 1).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.image, sb.image);
            match (&sa.target, &sb.target) {
                (Target::Mask(ma), Target::Mask(mb)) => assert_eq!(ma, mb),
                _ => panic!("wrong target kind"),
            }
        }
    }

    #[test]
    fn synthetic_depth_in_unit_range_with_corner_free_lens() {
        let ds = generate_synthetic_dataset(&SynthSpec::new(5, TaskKind::Depth), 2).unwrap();
        for s in &ds.samples {
            let Target::Depth { depth, lens } = &s.target else {
                panic!("wrong target kind")
            };
            assert!(depth.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let side = lens.dim().0;
            for &(y, x) in &[(0, 0), (0, side - 1), (side - 1, 0), (side - 1, side - 1)] {
                assert!(!lens[[y, x]], "lens covers corner ({y},{x})");
            }
            assert!(lens[[side / 2, side / 2]]);
        }
    }

    #[test]
    fn synthetic_boxes_are_tight_over_disjoint_lesions() {
        let mut spec = SynthSpec::new(12, TaskKind::Detection);
        spec.side = 48;
        let ds = generate_synthetic_dataset(&spec, 3).unwrap();
        let seg = {
            let mut s2 = spec.clone();
            s2.task = TaskKind::Segmentation;
            generate_synthetic_dataset(&s2, 3).unwrap()
        };
        // same seed: detection boxes must be the tight boxes of the
        // segmentation masks' connected components
        for (det, sg) in ds.samples.iter().zip(&seg.samples) {
            let Target::Boxes(boxes) = &det.target else { panic!() };
            let Target::Mask(mask) = &sg.target else { panic!() };
            let side = mask.dim().0 as f64;
            for b in boxes {
                assert!(b.is_valid());
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= side && b.y_max <= side);
            }
            // every foreground pixel is inside some box
            for y in 0..mask.dim().0 {
                for x in 0..mask.dim().1 {
                    if mask[[y, x]] {
                        assert!(
                            boxes.iter().any(|b| (x as f64) >= b.x_min
                                && (x as f64) < b.x_max
                                && (y as f64) >= b.y_min
                                && (y as f64) < b.y_max),
                            "lesion pixel outside every box"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn disk_roundtrip_preserves_structure() {
        let dir = tempfile::tempdir().unwrap();
        for task in [
            TaskKind::Classification,
            TaskKind::Detection,
            TaskKind::Segmentation,
            TaskKind::Depth,
        ] {
            let sub = dir.path().join(task.as_str());
            let ds = generate_synthetic_dataset(&SynthSpec::new(3, task), 5).unwrap();
            let mp = save_dataset(&ds, &sub).unwrap();
            let back = load_dataset(&mp).unwrap();
            assert_eq!(back.task, task);
            assert_eq!(back.samples.len(), 3);
            for (a, b) in ds.samples.iter().zip(&back.samples) {
                assert_eq!(a.id, b.id);
                // 8-bit quantization bounds the image error
                let err = (&a.image - &b.image).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(err <= 0.5 / 255.0 + 1e-9);
                match (&a.target, &b.target) {
                    (Target::Class(x), Target::Class(y)) => assert_eq!(x, y),
                    (Target::Boxes(x), Target::Boxes(y)) => assert_eq!(x, y),
                    (Target::Mask(x), Target::Mask(y)) => assert_eq!(x, y),
                    (Target::Depth { depth: dx, lens: lx }, Target::Depth { depth: dy, lens: ly }) => {
                        let err = (dx - dy).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        assert!(err <= 0.5 / 65535.0 + 1e-9);
                        assert_eq!(lx, ly);
                    }
                    _ => panic!("target kind changed in round trip"),
                }
            }
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(4, TaskKind::Segmentation);
        let p1 = dir.path().join("a");
        let p2 = dir.path().join("b");
        save_dataset(&generate_synthetic_dataset(&spec, 1).unwrap(), &p1).unwrap();
        save_dataset(&generate_synthetic_dataset(&spec, 1).unwrap(), &p2).unwrap();
        let m1 = std::fs::read(p1.join("manifest.json")).unwrap();
        let m2 = std::fs::read(p2.join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        let i1 = std::fs::read(p1.join("images/synth_00000.png")).unwrap();
        let i2 = std::fs::read(p2.join("images/synth_00000.png")).unwrap();
        assert_eq!(i1, i2);
    }
}
