//! Turning patch-grid attention into pixel-resolution maps in [0, 1].

use crate::error::{Error, Result};
use crate::explain::InitialAttentionMap;
use crate::imaging::{resize_bilinear, GrayImage};

pub const DEFAULT_SOFT_ERASE_RATE: f64 = 0.55;
pub const DEFAULT_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

/// Min-max normalization. A constant map has no activation and maps to zeros.
pub fn normalize01(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || hi <= lo {
        return vec![0.0; values.len()];
    }
    let span = hi - lo;
    values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Bilinear upsampling of an `h×w` grid to `nh×nw` (align-corners=false).
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Result<Vec<f64>> {
    if map.len() != h * w {
        return Err(Error::shape("upsample_bilinear", &[map.len()], &[h, w]));
    }
    if nh < h || nw < w {
        return Err(Error::Usage(format!(
            "upsample target {nh}x{nw} is smaller than source {h}x{w}"
        )));
    }
    Ok(resize_bilinear(map, h, w, nh, nw))
}

/// `min(Â, max(Â)·S_r)` pointwise.
pub fn soft_erase(map: &[f64], rate: f64) -> Vec<f64> {
    let cap = map.iter().copied().fold(0.0, f64::max) * rate;
    map.iter().map(|&v| v.min(cap)).collect()
}

/// Mean of maps from several input scales, renormalized to [0, 1].
pub fn multi_scale_fuse(maps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Usage("multi-scale fusion needs at least one map".into()))?;
    if let Some(bad) = maps.iter().find(|m| m.len() != first.len()) {
        return Err(Error::shape("multi_scale_fuse", &[first.len()], &[bad.len()]));
    }
    let inv = 1.0 / maps.len() as f64;
    let mean: Vec<f64> = (0..first.len())
        .map(|i| maps.iter().map(|m| m[i]).sum::<f64>() * inv)
        .collect();
    Ok(normalize01(&mean))
}

/// Normalizes a patch-grid map and upsamples it to `height×width`.
pub fn to_pixel_map(map: &InitialAttentionMap, height: usize, width: usize) -> Result<Vec<f64>> {
    let norm = normalize01(&map.values);
    upsample_bilinear(&norm, map.rows, map.cols, height, width)
}

/// Per-class pixel maps of one image, all `height×width` with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedAttentionStack {
    pub height: usize,
    pub width: usize,
    /// Foreground class index of each map, ascending.
    pub classes: Vec<usize>,
    pub maps: Vec<Vec<f64>>,
    pub soft_erase_rate: f64,
}

impl RefinedAttentionStack {
    /// Applies soft erase with rate `rate` to normalized, upsampled maps.
    pub fn new(
        height: usize,
        width: usize,
        classes: Vec<usize>,
        normalized: Vec<Vec<f64>>,
        rate: f64,
    ) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("soft erase rate must be in (0, 1], got {rate}")));
        }
        if classes.len() != normalized.len() {
            return Err(Error::Usage("one map per class is required".into()));
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Usage("classes must be strictly ascending".into()));
        }
        for m in &normalized {
            if m.len() != height * width {
                return Err(Error::shape("RefinedAttentionStack", &[m.len()], &[height, width]));
            }
        }
        let maps = normalized.iter().map(|m| soft_erase(m, rate)).collect();
        Ok(Self {
            height,
            width,
            classes,
            maps,
            soft_erase_rate: rate,
        })
    }

    pub fn map_for(&self, class: usize) -> Option<&[f64]> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|i| self.maps[i].as_slice())
    }
}

/// 8-bit heatmap, `round(255·A)`.
pub fn heatmap_image(map: &[f64], height: usize, width: usize) -> Result<GrayImage> {
    let pixels = map
        .iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    GrayImage::new(width, height, pixels)
}
