//! Batch commands over on-disk dataset splits. Every stage reads and writes
//! documented files, so any stage can be re-run from its inputs alone.

pub mod dataset_io;
mod label;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::Explainer;
use crate::imaging::{read_pgm, write_pgm, GrayImage};
use crate::labeler::{label_id, thresholds_json};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::refine::heatmap_image;
use crate::trainer::{synth_dataset, train, EpochStats, SynthConfig, TrainConfig};
use crate::vit::{load_weights, save_weights, ViTConfig, ViTModel};

pub use dataset_io::{read_dataset, write_dataset, LabelEntry, LabelsFile};
pub use label::{class_maps, pseudo_label_image, ImageLabel, LabelOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset_dir: PathBuf,
    /// Prefix of the weight files, see [`save_weights`].
    pub weights: PathBuf,
    pub output_dir: PathBuf,
    /// Number of images written by `gen-data`.
    pub num_samples: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub labeling: LabelOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data/train"),
            weights: PathBuf::from("model/vit"),
            output_dir: PathBuf::from("out"),
            num_samples: 2000,
            seed: 0,
            synth: SynthConfig::default(),
            model: ViTConfig::default(),
            train: TrainConfig::default(),
            labeling: LabelOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Generates `num_samples` synthetic images into `dataset_dir`.
pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<usize> {
    let samples = synth_dataset(cfg.num_samples, &cfg.synth, cfg.seed)?;
    write_dataset(&cfg.dataset_dir, &samples, cfg.synth.num_classes)?;
    Ok(samples.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

pub fn metrics_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".metrics.json");
    PathBuf::from(s)
}

/// Trains on `dataset_dir`, writing the weight files and
/// `<weights>.metrics.json` with one entry per epoch.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainReport> {
    let (labels, samples) = read_dataset(&cfg.dataset_dir)?;
    if labels.num_classes != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model config has {}",
            labels.num_classes, cfg.model.num_classes
        )));
    }
    let model = ViTModel::new(cfg.model.clone(), cfg.train.seed)?;
    let (model, epochs) = train(model, &samples, &cfg.train)?;
    if let Some(dir) = cfg.weights.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    save_weights(&model, &cfg.weights)?;
    let report = TrainReport { epochs };
    write_json(&metrics_path(&cfg.weights), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelRunSummary {
    pub processed: usize,
    /// `(sample id, error message)` for every image that could not be labeled.
    pub failures: Vec<(String, String)>,
}

fn label_one(
    model: &ViTModel,
    cfg: &PipelineConfig,
    entry: &LabelEntry,
) -> Result<BTreeMap<usize, f64>> {
    let dir = &cfg.dataset_dir;
    let out = &cfg.output_dir;
    let image = dataset_io::read_image(dir, &entry.id)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let saliency = if cfg.labeling.use_saliency {
        Some(dataset_io::read_saliency(dir, &entry.id, h, w)?)
    } else {
        None
    };
    let classes = entry.present_classes();
    let result = pseudo_label_image(model, &image, saliency.as_deref(), &classes, &cfg.labeling)?;
    write_pgm(
        dataset_io::mask_path(out, &entry.id),
        &GrayImage::new(w, h, result.label.grid)?,
    )?;
    for (c, map) in result.maps.classes.iter().zip(&result.maps.maps) {
        let path = out.join(format!("heat_{}_{}.pgm", entry.id, label_id(*c)));
        write_pgm(path, &heatmap_image(map, h, w)?)?;
    }
    Ok(result.thresholds)
}

/// Labels every image of `dataset_dir` into `output_dir` as
/// `mask_XXXX.pgm`, with heatmaps and a `thresholds.json` sidecar. Failures
/// are per image; the summary lists them.
pub fn cmd_pseudo_label(cfg: &PipelineConfig) -> Result<LabelRunSummary> {
    cfg.labeling.validate()?;
    let model = load_weights(&cfg.weights)?;
    let labels = LabelsFile::read(&cfg.dataset_dir)?;
    if labels.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, weights have {}",
            labels.num_classes, model.config.num_classes
        )));
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::file(&cfg.output_dir, e))?;
    let results: Vec<Result<BTreeMap<usize, f64>>> = labels
        .samples
        .par_iter()
        .map(|entry| label_one(&model, cfg, entry))
        .collect();

    let mut summary = LabelRunSummary::default();
    let mut sidecar = serde_json::Map::new();
    for (entry, result) in labels.samples.iter().zip(results) {
        match result {
            Ok(thresholds) => {
                summary.processed += 1;
                sidecar.insert(entry.id.clone(), thresholds_json(&thresholds));
            }
            Err(e) => summary.failures.push((entry.id.clone(), e.to_string())),
        }
    }
    write_json(&cfg.output_dir.join("thresholds.json"), &sidecar)?;
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub evaluated: usize,
    /// Ground-truth masks with no readable prediction.
    pub missing: Vec<String>,
}

fn mask_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("mask_") && n.ends_with(".pgm"))
        .collect();
    names.sort();
    Ok(names)
}

/// Compares every `mask_*.pgm` of `gt_dir` with the same file in `pred_dir`.
/// The class count comes from `gt_dir/labels.json` unless given.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, num_classes: Option<usize>) -> Result<EvalReport> {
    let num_classes = match num_classes {
        Some(c) => c,
        None => LabelsFile::read(gt_dir)?.num_classes,
    };
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut missing = Vec::new();
    let mut evaluated = 0;
    for name in mask_files(gt_dir)? {
        let gt = read_pgm(gt_dir.join(&name))?;
        let pred = match read_pgm(pred_dir.join(&name)) {
            Ok(p) if (p.width, p.height) == (gt.width, gt.height) => p,
            _ => {
                missing.push(name);
                continue;
            }
        };
        cm.accumulate(&pred.pixels, &gt.pixels)
            .map_err(|e| Error::Format(format!("{name}: {e}")))?;
        evaluated += 1;
    }
    Ok(EvalReport {
        metrics: cm.report(),
        evaluated,
        missing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub dtd: Option<f64>,
    pub rollout: Option<f64>,
    pub cam: Option<f64>,
    /// Images that failed under any explainer.
    pub failures: usize,
}

/// Runs the same labeling pipeline with each explainer into
/// `output_dir/<name>/` and scores it against the dataset masks.
pub fn cmd_compare(cfg: &PipelineConfig) -> Result<CompareReport> {
    let mut scores = BTreeMap::new();
    let mut failures = 0;
    for explainer in Explainer::ALL {
        let mut run = cfg.clone();
        run.labeling.explainer = explainer;
        run.output_dir = cfg.output_dir.join(explainer.name());
        let summary = cmd_pseudo_label(&run)?;
        failures += summary.failures.len();
        let eval = cmd_eval(&run.output_dir, &cfg.dataset_dir, None)?;
        write_json(&run.output_dir.join("eval.json"), &eval)?;
        scores.insert(explainer.name(), eval.metrics.miou);
    }
    let report = CompareReport {
        dtd: scores["dtd"],
        rollout: scores["rollout"],
        cam: scores["cam"],
        failures,
    };
    write_json(&cfg.output_dir.join("compare.json"), &report)?;
    Ok(report)
}
