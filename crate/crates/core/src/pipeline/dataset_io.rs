//! On-disk dataset split: `img_XXXX.ppm`, `mask_XXXX.pgm`, `sal_XXXX.pgm`
//! and `labels.json` mapping each sample id to its multi-hot labels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage, RgbImage};
use crate::tensor::Tensor;
use crate::trainer::Sample;

pub const LABELS_FILE: &str = "labels.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: String,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub num_classes: usize,
    pub samples: Vec<LabelEntry>,
}

impl LabelsFile {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let file: LabelsFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for s in &file.samples {
            if s.labels.len() != file.num_classes || s.labels.iter().any(|&l| l > 1) {
                return Err(Error::Format(format!(
                    "{}: sample {} needs {} binary labels",
                    path.display(),
                    s.id,
                    file.num_classes
                )));
            }
        }
        Ok(file)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(LABELS_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::file(&path, e))
    }
}

impl LabelEntry {
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&k| self.labels[k] == 1).collect()
    }

    pub fn multi_hot(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(l)).collect()
    }
}

pub fn sample_id(i: usize) -> String {
    format!("{i:04}")
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("img_{id}.ppm"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("mask_{id}.pgm"))
}

pub fn saliency_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("sal_{id}.pgm"))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `samples` as a split in `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, samples: &[Sample], num_classes: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = sample_id(i);
        let img = RgbImage::from_planar(s.width, s.height, s.image.data())?;
        write_ppm(image_path(dir, &id), &img)?;
        write_pgm(mask_path(dir, &id), &GrayImage::new(s.width, s.height, s.gt_mask.clone())?)?;
        let sal = s.saliency.iter().map(|&v| to_u8(v)).collect();
        write_pgm(saliency_path(dir, &id), &GrayImage::new(s.width, s.height, sal)?)?;
        entries.push(LabelEntry {
            id,
            labels: s.labels.iter().map(|&l| u8::from(l > 0.5)).collect(),
        });
    }
    LabelsFile {
        num_classes,
        samples: entries,
    }
    .write(dir)
}

pub fn read_image(dir: &Path, id: &str) -> Result<Tensor> {
    let img = read_ppm(image_path(dir, id))?;
    Tensor::new(vec![3, img.height, img.width], img.to_planar())
}

/// Saliency scaled to [0, 1]; must match the image size.
pub fn read_saliency(dir: &Path, id: &str, height: usize, width: usize) -> Result<Vec<f64>> {
    let path = saliency_path(dir, id);
    let sal = read_pgm(&path)?;
    if (sal.height, sal.width) != (height, width) {
        return Err(Error::Format(format!(
            "{}: saliency is {}x{}, image is {height}x{width}",
            path.display(),
            sal.height,
            sal.width
        )));
    }
    Ok(sal.pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
}

/// Loads a whole split for training or evaluation. Ground-truth masks and
/// saliency are optional; missing ones are left empty.
pub fn read_dataset(dir: &Path) -> Result<(LabelsFile, Vec<Sample>)> {
    let labels = LabelsFile::read(dir)?;
    let samples = labels
        .samples
        .iter()
        .map(|entry| {
            let image = read_image(dir, &entry.id)?;
            let (height, width) = (image.shape()[1], image.shape()[2]);
            let mask = mask_path(dir, &entry.id);
            let gt_mask = if mask.exists() { read_pgm(&mask)?.pixels } else { Vec::new() };
            let saliency = if saliency_path(dir, &entry.id).exists() {
                read_saliency(dir, &entry.id, height, width)?
            } else {
                Vec::new()
            };
            Ok(Sample {
                image,
                labels: entry.multi_hot(),
                gt_mask,
                saliency,
                height,
                width,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, samples))
}
