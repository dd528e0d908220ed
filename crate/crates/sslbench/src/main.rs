//! Command-line harness: synthetic data generation, pretraining,
//! fine-tuning, prediction-file evaluation, and cross-run analysis, with
//! every run stored under a directory named by its configuration hash.
//!
//! Exit codes: 0 on success, 2 when the request itself is invalid
//! (bad flags, malformed config or prediction files, colliding runs),
//! 1 on runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use sslbench::analysis::{
    self, Algorithm, AnalysisReport, Arch, MetricKind, PipelineResult, PipelineTag, PretrainData,
};
use sslbench::augment::AugmentConfig;
use sslbench::config::Config;
use sslbench::data::{
    generate_synthetic_dataset, load_dataset, save_dataset, split_dataset, Dataset, SynthSpec,
    Target, TaskKind,
};
use sslbench::metrics::{
    ap_range, classification_metrics, confusion, dataset_ap, depth_metrics, depth_postprocess,
    segmentation_metrics, ClassificationMetrics, DepthMetrics, Detection, MatchRule, Scene,
    SegMetrics, DEPTH_RANGE_CM,
};
use sslbench::store::RunStore;
use sslbench::trainer::{
    eval_classification, eval_depth, eval_segmentation, finetune, pretrain, ArchConfig,
    PretrainAlgo, TrainConfig,
};
use sslbench::{heads::ssi_align, ssl::SslConfig, Error};

#[derive(Parser)]
#[command(name = "sslbench", version, about = "Self-supervised pretraining benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it to disk.
    Synth {
        /// Task: classification | detection | segmentation | depth.
        #[arg(long)]
        task: String,
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Number of classes (classification only).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving images, targets, and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder; writes pretrained.ckpt and record.json.
    Pretrain {
        /// Configuration file of key=value lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output root (defaults to $SSLBENCH_OUT, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Archive a previous run with the same configuration.
        #[arg(long)]
        force: bool,
        /// key=value overrides applied on top of the file.
        #[arg(value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fine-tune on a labelled dataset; writes checkpoints and a metric report.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a prediction file against a dataset manifest.
    Evaluate {
        /// Task: classification | detection | segmentation | depth.
        #[arg(long)]
        task: String,
        /// Dataset manifest the predictions refer to.
        #[arg(long)]
        manifest: PathBuf,
        /// JSONL prediction file, one line per image.
        #[arg(long)]
        predictions: PathBuf,
        /// Optional path for the JSON metric report (also printed).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare pipelines and emit improvement tables and figures.
    Analyze {
        /// Run store root to scan for pipeline.json results.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Explicit JSON array of pipeline results.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Output directory for tables and plots.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A task-tagged bundle of evaluation metrics.
#[derive(Debug, Serialize)]
#[serde(tag = "task", content = "metrics", rename_all = "snake_case")]
enum MetricReport {
    Classification(ClassificationMetrics),
    Detection { ap: f64, ap50: f64, ap75: f64 },
    Segmentation(SegMetrics),
    Depth(DepthMetrics),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for problems in what was asked (validation), 1 for failures while
/// doing it.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Image(_) | Error::NonFiniteLoss { .. } => 1,
        _ => 2,
    }
}

fn run(cmd: Cmd) -> sslbench::Result<()> {
    match cmd {
        Cmd::Synth { task, n, classes, side, seed, out } => cmd_synth(&task, n, classes, side, seed, &out),
        Cmd::Pretrain { config, out, force, set } => {
            let cfg = build_config(config.as_deref(), &set)?;
            cmd_pretrain(&cfg, out.as_deref(), force)
        }
        Cmd::Finetune { config, out, force, set } => {
            let cfg = build_config(config.as_deref(), &set)?;
            cmd_finetune(&cfg, out.as_deref(), force)
        }
        Cmd::Evaluate { task, manifest, predictions, report } => {
            cmd_evaluate(&task, &manifest, &predictions, report.as_deref())
        }
        Cmd::Analyze { store, results, out } => cmd_analyze(store.as_deref(), results.as_deref(), &out),
    }
}

fn build_config(file: Option<&Path>, overrides: &[String]) -> sslbench::Result<Config> {
    let mut cfg = match file {
        Some(p) => Config::from_file(p)?,
        None => Config::new(),
    };
    cfg.merge(&Config::from_pairs(overrides)?);
    Ok(cfg)
}

fn cmd_synth(
    task: &str,
    n: usize,
    classes: usize,
    side: usize,
    seed: u64,
    out: &Path,
) -> sslbench::Result<()> {
    let task = TaskKind::parse(task)?;
    let spec = SynthSpec { n, task, classes, side };
    let ds = generate_synthetic_dataset(&spec, seed)?;
    let manifest = save_dataset(&ds, out)?;
    println!("wrote {} {} images under {}", n, task.as_str(), out.display());
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn cmd_pretrain(cfg: &Config, out_root: Option<&Path>, force: bool) -> sslbench::Result<()> {
    let ds = load_dataset(Path::new(cfg.get_str("data")?))?;
    let algo = PretrainAlgo::parse(cfg.get_str("algorithm")?)?;
    let arch = ArchConfig::from_config(cfg)?;
    let tcfg = TrainConfig::from_config(cfg)?;
    let scfg = SslConfig::from_config(cfg)?;
    // reject impossible requests before claiming a run directory
    if algo == PretrainAlgo::Mae && matches!(arch, ArchConfig::Conv(_)) {
        return Err(Error::MaeNeedsTokens);
    }
    let store = RunStore::resolve(out_root);
    let run = store.create_run(cfg, force)?;
    println!("run {} -> {}", run.hash, run.dir.display());
    let (_, record) = pretrain(&ds, algo, &arch, &scfg, &tcfg, Some(&run.dir))?;
    println!(
        "pretrained {} for {} epochs in {:.1}s; checkpoint: {}",
        algo.as_str(),
        record.epochs.len(),
        record.wall_secs,
        run.path("pretrained.ckpt").display()
    );
    Ok(())
}

fn cmd_finetune(cfg: &Config, out_root: Option<&Path>, force: bool) -> sslbench::Result<()> {
    let ds = load_dataset(Path::new(cfg.get_str("data")?))?;
    let arch = ArchConfig::from_config(cfg)?;
    let tcfg = TrainConfig::from_config(cfg)?;
    let ratios = [
        cfg.f64_or("split.train", 0.7)?,
        cfg.f64_or("split.val", 0.15)?,
        cfg.f64_or("split.test", 0.15)?,
    ];
    let split = split_dataset(ds.samples.len(), ratios, cfg.u64_or("split.seed", tcfg.seed)?)?;
    if ds.task == TaskKind::Detection {
        return Err(Error::Invalid(
            "detection is scored from prediction files; use the evaluate command".into(),
        ));
    }
    let init = match cfg.opt_str("init") {
        Some(p) => Some(sslbench::encoders::read_checkpoint(Path::new(p))?.1),
        None => None,
    };
    let store = RunStore::resolve(out_root);
    let run = store.create_run(cfg, force)?;
    println!("run {} -> {}", run.hash, run.dir.display());
    let (mut model, record) = finetune(&ds, &split, &arch, &tcfg, init.as_ref(), Some(&run.dir))?;

    // score the held-out split with the freshly trained weights
    let eval_idx: &[usize] = if !split.test.is_empty() {
        &split.test
    } else if !split.val.is_empty() {
        &split.val
    } else {
        &split.train
    };
    let acfg = AugmentConfig { side: tcfg.side, ..AugmentConfig::default() };
    let (report, value, kind) = match ds.task {
        TaskKind::Classification => {
            let m = eval_classification(&mut model, &ds, eval_idx, &acfg)?;
            let v = m.m_f1;
            (MetricReport::Classification(m), v, MetricKind::Score)
        }
        TaskKind::Segmentation => {
            let m = eval_segmentation(&mut model, &ds, eval_idx, &acfg)?;
            let v = m.m_dice;
            (MetricReport::Segmentation(m), v, MetricKind::Score)
        }
        TaskKind::Depth => {
            let m = eval_depth(&mut model, &ds, eval_idx, &acfg)?;
            let v = m.m_rmse / DEPTH_RANGE_CM;
            (MetricReport::Depth(m), v, MetricKind::ErrorMagnitude)
        }
        TaskKind::Detection => {
            return Err(Error::Invalid(
                "detection is scored from prediction files; use the evaluate command".into(),
            ))
        }
    };
    let report_json = serde_json::to_string_pretty(&report)?;
    std::fs::write(run.path("report.json"), &report_json)?;
    println!("{report_json}");

    if let Some(tag) = pipeline_tag(cfg, &arch)? {
        let result = PipelineResult { tag, task: ds.task, metric: kind, value };
        std::fs::write(run.path("pipeline.json"), serde_json::to_string_pretty(&result)?)?;
        println!("pipeline {} {} = {:.6}", tag, ds.task.as_str(), value);
    }
    println!(
        "finished in {:.1}s (best epoch {:?}); artifacts under {}",
        record.wall_secs,
        record.best_epoch,
        run.dir.display()
    );
    Ok(())
}

/// Identity of the run in the comparison grid, when the config declares one
/// via `pipeline.data` and `pipeline.algorithm`.
fn pipeline_tag(cfg: &Config, arch: &ArchConfig) -> sslbench::Result<Option<PipelineTag>> {
    let (Some(data), Some(alg)) = (cfg.opt_str("pipeline.data"), cfg.opt_str("pipeline.algorithm"))
    else {
        return Ok(None);
    };
    let data = match data {
        "domain" => PretrainData::DomainSet,
        "general" => PretrainData::GeneralSet,
        "none" | "scratch" => PretrainData::None,
        other => return Err(Error::Invalid(format!("unknown pipeline.data {other:?}"))),
    };
    let algorithm = match alg {
        "mocov3" => Algorithm::MocoV3,
        "barlow" => Algorithm::Barlow,
        "mae" => Algorithm::Mae,
        "supervised" => Algorithm::Supervised,
        "none" => Algorithm::None,
        other => return Err(Error::Invalid(format!("unknown pipeline.algorithm {other:?}"))),
    };
    let arch = match arch {
        ArchConfig::Conv(_) => Arch::Conv,
        ArchConfig::Vit(_) => Arch::Vit,
    };
    Ok(Some(PipelineTag { arch, data, algorithm }))
}

// ---------------------------------------------------------------------------
// Evaluation of prediction files
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ClassLine {
    id: String,
    class: usize,
}

#[derive(Deserialize)]
struct BoxesLine {
    id: String,
    boxes: Vec<Detection>,
}

#[derive(Deserialize)]
struct PlaneLine {
    id: String,
    #[serde(alias = "depth")]
    probs: Vec<Vec<f64>>,
}

/// Parse one JSONL line, naming the 1-based line number on failure.
fn parse_line<T: serde::de::DeserializeOwned>(line: &str, lineno: usize) -> sslbench::Result<T> {
    serde_json::from_str(line)
        .map_err(|e| Error::Invalid(format!("predictions line {lineno}: {e}")))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> sslbench::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1)?);
    }
    Ok(out)
}

fn plane_from_rows(rows: &[Vec<f64>], id: &str) -> sslbench::Result<Array2<f64>> {
    let h = rows.len();
    let w = rows.first().map(Vec::len).unwrap_or(0);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::Invalid(format!("prediction {id:?}: ragged or empty plane")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((h, w), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Index dataset samples by id, requiring a prediction for each.
fn by_id<'a, T>(
    preds: Vec<T>,
    id_of: impl Fn(&T) -> &str,
    ds: &'a Dataset,
) -> sslbench::Result<Vec<(T, &'a Target)>> {
    let mut map: BTreeMap<String, T> = BTreeMap::new();
    for p in preds {
        map.insert(id_of(&p).to_string(), p);
    }
    let mut out = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let Some(p) = map.remove(&s.id) else {
            return Err(Error::Invalid(format!("no prediction for image {:?}", s.id)));
        };
        out.push((p, &s.target));
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Invalid(format!("prediction for unknown image {extra:?}")));
    }
    Ok(out)
}

fn cmd_evaluate(
    task: &str,
    manifest: &Path,
    predictions: &Path,
    report_path: Option<&Path>,
) -> sslbench::Result<()> {
    let task = TaskKind::parse(task)?;
    let ds = load_dataset(manifest)?;
    if ds.task != task {
        return Err(Error::Invalid(format!(
            "manifest holds a {} dataset, not {}",
            ds.task.as_str(),
            task.as_str()
        )));
    }
    let report = match task {
        TaskKind::Classification => {
            let lines: Vec<ClassLine> = read_jsonl(predictions)?;
            let pairs = by_id(lines, |l| &l.id, &ds)?;
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for (p, t) in pairs {
                let Target::Class(c) = t else {
                    return Err(Error::Invalid("sample without class label".into()));
                };
                preds.push(p.class);
                labels.push(*c);
            }
            let n_classes = ds.class_names.len().max(labels.iter().max().map_or(0, |m| m + 1));
            MetricReport::Classification(classification_metrics(&confusion(
                &preds, &labels, n_classes,
            )?))
        }
        TaskKind::Detection => {
            let lines: Vec<BoxesLine> = read_jsonl(predictions)?;
            let pairs = by_id(lines, |l| &l.id, &ds)?;
            let mut scenes = Vec::new();
            for (p, t) in pairs {
                let Target::Boxes(truths) = t else {
                    return Err(Error::Invalid("sample without box targets".into()));
                };
                scenes.push(Scene { detections: p.boxes, truths: truths.clone() });
            }
            let rule = MatchRule::default();
            MetricReport::Detection {
                ap: ap_range(&scenes, rule)?,
                ap50: dataset_ap(&scenes, 0.50, rule)?,
                ap75: dataset_ap(&scenes, 0.75, rule)?,
            }
        }
        TaskKind::Segmentation => {
            let lines: Vec<PlaneLine> = read_jsonl(predictions)?;
            let pairs = by_id(lines, |l| &l.id, &ds)?;
            let mut probs = Vec::new();
            let mut truths = Vec::new();
            for (p, t) in pairs {
                let Target::Mask(m) = t else {
                    return Err(Error::Invalid("sample without mask target".into()));
                };
                probs.push(plane_from_rows(&p.probs, &p.id)?);
                truths.push(m.clone());
            }
            MetricReport::Segmentation(segmentation_metrics(&probs, &truths)?)
        }
        TaskKind::Depth => {
            let lines: Vec<PlaneLine> = read_jsonl(predictions)?;
            let pairs = by_id(lines, |l| &l.id, &ds)?;
            let mut preds = Vec::new();
            let mut truths = Vec::new();
            let mut lenses = Vec::new();
            for (p, t) in pairs {
                let Target::Depth { depth, lens } = t else {
                    return Err(Error::Invalid("sample without depth target".into()));
                };
                let raw = plane_from_rows(&p.probs, &p.id)?;
                if raw.dim() != depth.dim() {
                    return Err(Error::Shape(format!(
                        "prediction {:?} is {:?}, ground truth {:?}",
                        p.id,
                        raw.dim(),
                        depth.dim()
                    )));
                }
                let align = ssi_align(&raw, depth, &lens.mapv(|b| if b { 1.0 } else { 0.0 }))?;
                let (h, w) = depth.dim();
                preds.push(depth_postprocess(&raw, align, h, w, lens)?);
                truths.push(depth.mapv(|v| v * DEPTH_RANGE_CM));
                lenses.push(lens.clone());
            }
            MetricReport::Depth(depth_metrics(&preds, &truths, &lenses)?)
        }
    };
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = report_path {
        std::fs::write(p, &json)?;
    }
    println!("{json}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

fn collect_results(
    store: Option<&Path>,
    results: Option<&Path>,
) -> sslbench::Result<Vec<PipelineResult>> {
    let mut all = Vec::new();
    if let Some(p) = results {
        let text = std::fs::read_to_string(p)?;
        let batch: Vec<PipelineResult> = serde_json::from_str(&text)?;
        all.extend(batch);
    }
    if let Some(root) = store {
        let store = RunStore::resolve(Some(root));
        for hash in store.list()? {
            let path = store.run_dir(&hash).join("pipeline.json");
            if path.is_file() {
                let r: PipelineResult = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                all.push(r);
            }
        }
    }
    if all.is_empty() {
        return Err(Error::Invalid(
            "no pipeline results found; pass --results or --store with tagged runs".into(),
        ));
    }
    Ok(all)
}

fn cmd_analyze(
    store: Option<&Path>,
    results: Option<&Path>,
    out: &Path,
) -> sslbench::Result<()> {
    let all = collect_results(store, results)?;
    let report = analysis::analyze(&all)?;
    std::fs::create_dir_all(out)?;
    analysis::write_report_json(&out.join("analysis.json"), &report)?;
    analysis::write_comparisons_csv(&out.join("analysis.csv"), &report)?;
    for (name, comps) in [
        ("bars_supervised_to_ssl.png", &report.supervised_to_ssl),
        ("bars_general_to_domain.png", &report.general_to_domain),
        ("bars_conv_to_vit.png", &report.conv_to_vit),
    ] {
        if comps.is_empty() {
            println!("{name}: skipped (no comparable pairs)");
        } else {
            analysis::plot_improvement_bars(&out.join(name), comps)?;
        }
    }
    plot_rankings(out, &report)?;
    print_summary(&report);
    println!("analysis written to {}", out.display());
    Ok(())
}

/// Ranking figure: one radar series per task over the pipelines as axes
/// (error magnitude, smaller polygons are better).
fn plot_rankings(out: &Path, report: &AnalysisReport) -> sslbench::Result<()> {
    let mut tags: Vec<PipelineTag> = Vec::new();
    for (_, ranking) in &report.rankings {
        for (tag, _) in ranking {
            if !tags.contains(tag) {
                tags.push(*tag);
            }
        }
    }
    tags.sort();
    if tags.len() < 3 {
        println!("ranking.png: skipped (needs at least three pipelines)");
        return Ok(());
    }
    let mut series = Vec::new();
    for (task, ranking) in &report.rankings {
        let by_tag: BTreeMap<PipelineTag, f64> = ranking.iter().copied().collect();
        let values: Vec<f64> = tags.iter().map(|t| by_tag.get(t).copied().unwrap_or(0.0)).collect();
        series.push((task.as_str().to_string(), values));
    }
    analysis::plot_radar(&out.join("ranking.png"), &series)
}

fn print_summary(report: &AnalysisReport) {
    for (family, comps) in [
        ("supervised->ssl", &report.supervised_to_ssl),
        ("general->domain", &report.general_to_domain),
        ("conv->vit", &report.conv_to_vit),
    ] {
        for c in comps {
            println!(
                "{family} {}: {} -> {}: {:+.4}%",
                c.task.as_str(),
                c.baseline,
                c.candidate,
                c.pct_improvement
            );
        }
    }
    for (task, ranking) in &report.rankings {
        let order: Vec<String> = ranking.iter().map(|(t, _)| t.to_string()).collect();
        println!("ranking {}: {}", task.as_str(), order.join(" > "));
    }
}
