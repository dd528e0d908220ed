//! Cross-pipeline improvement analysis: converts headline metrics to a
//! common error magnitude, computes relative improvement percentages along
//! three comparison axes, ranks pipelines, and renders CSV, JSON, and PNG
//! chart outputs.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::{Error, Result};

/// How a headline metric turns into an error magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// A score in `[0, 1]` where higher is better: error is `|1 − v|`.
    Score,
    /// A non-negative error where lower is better: used as-is.
    ErrorMagnitude,
}

/// Convert a metric value to an error magnitude.
pub fn to_error(value: f64, kind: MetricKind) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Invalid(format!("non-finite metric value {value}")));
    }
    match kind {
        MetricKind::Score => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Invalid(format!("score {value} outside [0, 1]")));
            }
            Ok((1.0 - value).abs())
        }
        MetricKind::ErrorMagnitude => {
            if value < 0.0 {
                return Err(Error::Invalid(format!("negative error magnitude {value}")));
            }
            Ok(value)
        }
    }
}

/// Relative improvement `100·(δ_base − δ_new)/δ_base` in percent.
pub fn improvement(base_error: f64, new_error: f64) -> Result<f64> {
    if base_error == 0.0 {
        return Err(Error::ZeroBaseError);
    }
    Ok(100.0 * (base_error - new_error) / base_error)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Conv,
    Vit,
}

/// Which corpus the encoder was pretrained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainData {
    DomainSet,
    GeneralSet,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    MocoV3,
    Barlow,
    Mae,
    Supervised,
    None,
}

/// Identity of one pretrain/fine-tune pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PipelineTag {
    pub arch: Arch,
    pub data: PretrainData,
    pub algorithm: Algorithm,
}

impl fmt::Display for PipelineTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arch = match self.arch {
            Arch::Conv => "conv",
            Arch::Vit => "vit",
        };
        let data = match self.data {
            PretrainData::DomainSet => "domain",
            PretrainData::GeneralSet => "general",
            PretrainData::None => "scratch",
        };
        let alg = match self.algorithm {
            Algorithm::MocoV3 => "mocov3",
            Algorithm::Barlow => "barlow",
            Algorithm::Mae => "mae",
            Algorithm::Supervised => "supervised",
            Algorithm::None => "none",
        };
        write!(f, "{arch}-{data}-{alg}")
    }
}

/// One pipeline's headline result on one downstream task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub tag: PipelineTag,
    pub task: TaskKind,
    pub metric: MetricKind,
    pub value: f64,
}

/// Pipelines ordered best-first by error magnitude; exact ties fall back to
/// the lexicographic tag order. All results must score the same task.
pub fn rank_models(results: &[PipelineResult]) -> Result<Vec<(PipelineTag, f64)>> {
    if results.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let task = results[0].task;
    let mut ranked = Vec::with_capacity(results.len());
    for r in results {
        if r.task != task {
            return Err(Error::Invalid(format!(
                "cannot rank across tasks: {} vs {}",
                r.task.as_str(),
                task.as_str()
            )));
        }
        ranked.push((r.tag, to_error(r.value, r.metric)?));
    }
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// One baseline-to-candidate comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: TaskKind,
    pub baseline: PipelineTag,
    pub candidate: PipelineTag,
    pub base_value: f64,
    pub new_value: f64,
    pub base_error: f64,
    pub new_error: f64,
    pub pct_improvement: f64,
}

fn compare(base: &PipelineResult, new: &PipelineResult) -> Result<Comparison> {
    if base.task != new.task || base.metric != new.metric {
        return Err(Error::Invalid("comparison across different metrics".into()));
    }
    let be = to_error(base.value, base.metric)?;
    let ne = to_error(new.value, new.metric)?;
    Ok(Comparison {
        task: base.task,
        baseline: base.tag,
        candidate: new.tag,
        base_value: base.value,
        new_value: new.value,
        base_error: be,
        new_error: ne,
        pct_improvement: improvement(be, ne)?,
    })
}

fn find(results: &[PipelineResult], tag: PipelineTag, task: TaskKind) -> Option<&PipelineResult> {
    results.iter().find(|r| r.tag == tag && r.task == task)
}

fn tasks_of(results: &[PipelineResult]) -> Vec<TaskKind> {
    let mut tasks: Vec<TaskKind> = Vec::new();
    for r in results {
        if !tasks.contains(&r.task) {
            tasks.push(r.task);
        }
    }
    tasks
}

const SSL_ALGOS: [Algorithm; 3] = [Algorithm::MocoV3, Algorithm::Barlow, Algorithm::Mae];

/// Supervised pretraining against each self-supervised algorithm on the
/// same architecture. Only general-corpus SSL pipelines take part.
pub fn pairs_supervised_to_ssl(results: &[PipelineResult]) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for task in tasks_of(results) {
        for arch in [Arch::Conv, Arch::Vit] {
            let base_tag = PipelineTag {
                arch,
                data: PretrainData::GeneralSet,
                algorithm: Algorithm::Supervised,
            };
            let Some(base) = find(results, base_tag, task) else { continue };
            for alg in SSL_ALGOS {
                let tag = PipelineTag {
                    arch,
                    data: PretrainData::GeneralSet,
                    algorithm: alg,
                };
                if let Some(new) = find(results, tag, task) {
                    out.push(compare(base, new)?);
                }
            }
        }
    }
    Ok(out)
}

/// General-corpus against domain-corpus pretraining, per self-supervised
/// algorithm and architecture.
pub fn pairs_general_to_domain(results: &[PipelineResult]) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for task in tasks_of(results) {
        for arch in [Arch::Conv, Arch::Vit] {
            for alg in SSL_ALGOS {
                let base_tag = PipelineTag {
                    arch,
                    data: PretrainData::GeneralSet,
                    algorithm: alg,
                };
                let new_tag = PipelineTag {
                    arch,
                    data: PretrainData::DomainSet,
                    algorithm: alg,
                };
                if let (Some(base), Some(new)) =
                    (find(results, base_tag, task), find(results, new_tag, task))
                {
                    out.push(compare(base, new)?);
                }
            }
        }
    }
    Ok(out)
}

/// Convolutional against transformer encoders under identical pretraining.
/// Only algorithms run on both architectures qualify, which leaves out
/// single-architecture ones.
pub fn pairs_conv_to_vit(results: &[PipelineResult]) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for task in tasks_of(results) {
        for data in [PretrainData::DomainSet, PretrainData::GeneralSet, PretrainData::None] {
            for alg in [
                Algorithm::MocoV3,
                Algorithm::Barlow,
                Algorithm::Mae,
                Algorithm::Supervised,
                Algorithm::None,
            ] {
                let conv = find(results, PipelineTag { arch: Arch::Conv, data, algorithm: alg }, task);
                let vit = find(results, PipelineTag { arch: Arch::Vit, data, algorithm: alg }, task);
                if let (Some(base), Some(new)) = (conv, vit) {
                    out.push(compare(base, new)?);
                }
            }
        }
    }
    Ok(out)
}

/// Full analysis artifact, serialized to JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub results: Vec<PipelineResult>,
    pub supervised_to_ssl: Vec<Comparison>,
    pub general_to_domain: Vec<Comparison>,
    pub conv_to_vit: Vec<Comparison>,
    pub rankings: Vec<(TaskKind, Vec<(PipelineTag, f64)>)>,
}

/// Build the three comparison families and per-task rankings.
pub fn analyze(results: &[PipelineResult]) -> Result<AnalysisReport> {
    if results.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rankings = Vec::new();
    for task in tasks_of(results) {
        let subset: Vec<PipelineResult> =
            results.iter().copied().filter(|r| r.task == task).collect();
        rankings.push((task, rank_models(&subset)?));
    }
    Ok(AnalysisReport {
        results: results.to_vec(),
        supervised_to_ssl: pairs_supervised_to_ssl(results)?,
        general_to_domain: pairs_general_to_domain(results)?,
        conv_to_vit: pairs_conv_to_vit(results)?,
        rankings,
    })
}

/// One CSV row per comparison across all three families.
pub fn write_comparisons_csv(path: &Path, report: &AnalysisReport) -> Result<()> {
    let mut out = String::from(
        "family,task,baseline,candidate,base_value,new_value,base_error,new_error,pct_improvement\n",
    );
    for (family, list) in [
        ("supervised_to_ssl", &report.supervised_to_ssl),
        ("general_to_domain", &report.general_to_domain),
        ("conv_to_vit", &report.conv_to_vit),
    ] {
        for c in list {
            out.push_str(&format!(
                "{family},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.4}\n",
                c.task.as_str(),
                c.baseline,
                c.candidate,
                c.base_value,
                c.new_value,
                c.base_error,
                c.new_error,
                c.pct_improvement
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_report_json(path: &Path, report: &AnalysisReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const BG: image::Rgb<u8> = image::Rgb([255, 255, 255]);
const AXIS: image::Rgb<u8> = image::Rgb([40, 40, 40]);
const POS: image::Rgb<u8> = image::Rgb([46, 139, 87]);
const NEG: image::Rgb<u8> = image::Rgb([178, 34, 34]);

fn draw_line(img: &mut image::RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, c: image::Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Vertical bar chart of improvement percentages, one bar per comparison,
/// green above and red below the zero line.
pub fn plot_improvement_bars(path: &Path, comparisons: &[Comparison]) -> Result<()> {
    if comparisons.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut img = image::RgbImage::from_pixel(PLOT_W, PLOT_H, BG);
    let margin = 40i32;
    let max_abs = comparisons
        .iter()
        .map(|c| c.pct_improvement.abs())
        .fold(1.0f64, f64::max);
    let zero_y = (PLOT_H / 2) as i32;
    let usable = zero_y - margin;
    draw_line(&mut img, margin, zero_y, PLOT_W as i32 - margin, zero_y, AXIS);
    draw_line(&mut img, margin, margin, margin, PLOT_H as i32 - margin, AXIS);
    let span = PLOT_W as i32 - 2 * margin;
    let slot = span / comparisons.len() as i32;
    let bar_w = (slot * 3 / 5).max(2);
    for (i, c) in comparisons.iter().enumerate() {
        let x0 = margin + slot * i as i32 + (slot - bar_w) / 2;
        let hpx = ((c.pct_improvement / max_abs) * usable as f64) as i32;
        let (top, bot, col) = if hpx >= 0 {
            (zero_y - hpx, zero_y, POS)
        } else {
            (zero_y, zero_y - hpx, NEG)
        };
        for x in x0..x0 + bar_w {
            draw_line(&mut img, x, top, x, bot, col);
        }
    }
    img.save(path).map_err(Error::from)
}

/// Radar chart: one closed polygon per series over axes spread evenly round
/// a circle, values normalized to the largest magnitude present.
pub fn plot_radar(path: &Path, series: &[(String, Vec<f64>)]) -> Result<()> {
    let axes = series.first().map(|(_, v)| v.len()).unwrap_or(0);
    if axes < 3 {
        return Err(Error::Invalid("radar chart needs at least three axes".into()));
    }
    if series.iter().any(|(_, v)| v.len() != axes) {
        return Err(Error::Shape("radar chart: ragged series".into()));
    }
    let side = PLOT_H;
    let mut img = image::RgbImage::from_pixel(side, side, BG);
    let cx = side as f64 / 2.0;
    let cy = cx;
    let radius = cx - 30.0;
    let max_abs = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .fold(1e-12f64, |m, v| m.max(v.abs()));
    let point = |axis: usize, value: f64| -> (i32, i32) {
        let angle = std::f64::consts::TAU * axis as f64 / axes as f64 - std::f64::consts::FRAC_PI_2;
        let r = radius * (value / max_abs).clamp(0.0, 1.0);
        ((cx + r * angle.cos()) as i32, (cy + r * angle.sin()) as i32)
    };
    for a in 0..axes {
        let (x, y) = point(a, max_abs);
        draw_line(&mut img, cx as i32, cy as i32, x, y, AXIS);
    }
    let palette = [POS, NEG, image::Rgb([30, 60, 160]), image::Rgb([200, 140, 0])];
    for (si, (_, values)) in series.iter().enumerate() {
        let col = palette[si % palette.len()];
        let pts: Vec<(i32, i32)> = (0..axes).map(|a| point(a, values[a])).collect();
        for a in 0..axes {
            let (x0, y0) = pts[a];
            let (x1, y1) = pts[(a + 1) % axes];
            draw_line(&mut img, x0, y0, x1, y1, col);
        }
    }
    img.save(path).map_err(Error::from)
}
