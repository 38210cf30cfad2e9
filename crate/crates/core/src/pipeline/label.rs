//! Per-image label generation: explain, normalize, upsample, soft erase,
//! initial label, EPOM.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{explain, Explainer, RelevanceConfig};
use crate::imaging::resize_planar;
use crate::labeler::{
    epom_refine, initial_pseudo_label, initial_pseudo_label_no_saliency, EpomConfig, PseudoLabel,
};
use crate::refine::{multi_scale_fuse, to_pixel_map, RefinedAttentionStack, DEFAULT_SCALES};
use crate::refine::DEFAULT_SOFT_ERASE_RATE;
use crate::tensor::Tensor;
use crate::vit::ViTModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelOptions {
    pub explainer: Explainer,
    pub relevance: RelevanceConfig,
    pub soft_erase_rate: f64,
    pub epom: EpomConfig,
    pub use_epom: bool,
    pub use_saliency: bool,
    pub multi_scale: bool,
    /// Resize the model input so its long side has this length.
    pub long_side: Option<usize>,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            explainer: Explainer::Dtd,
            relevance: RelevanceConfig::default(),
            soft_erase_rate: DEFAULT_SOFT_ERASE_RATE,
            epom: EpomConfig::default(),
            use_epom: true,
            use_saliency: true,
            multi_scale: false,
            long_side: None,
        }
    }
}

impl LabelOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.soft_erase_rate > 0.0 && self.soft_erase_rate <= 1.0) {
            return Err(Error::Config(format!(
                "soft erase rate must be in (0, 1], got {}",
                self.soft_erase_rate
            )));
        }
        if self.long_side == Some(0) {
            return Err(Error::Config("long_side must be positive".into()));
        }
        self.epom.validate()
    }
}

/// Input size for the model: scaled, then snapped to a multiple of `patch`.
fn input_size(h: usize, w: usize, scale: f64, long_side: Option<usize>, patch: usize) -> (usize, usize) {
    let base = long_side.map_or(1.0, |l| l as f64 / h.max(w) as f64);
    let snap = |n: usize| {
        let target = n as f64 * base * scale / patch as f64;
        (target.round() as usize).max(1) * patch
    };
    (snap(h), snap(w))
}

fn resized_input(image: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (nh, nw) == (h, w) {
        return Ok(image.clone());
    }
    Tensor::new(vec![c, nh, nw], resize_planar(image.data(), c, h, w, nh, nw))
}

/// Normalized pixel-resolution maps (before soft erase) for `classes`.
pub fn class_maps(
    model: &ViTModel,
    image: &Tensor,
    classes: &[usize],
    opts: &LabelOptions,
) -> Result<Vec<Vec<f64>>> {
    if image.rank() != 3 {
        return Err(Error::Usage(format!("expected a C×H×W image, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let patch = model.config.patch_size;
    let scales: &[f64] = if opts.multi_scale { &DEFAULT_SCALES } else { &[1.0] };
    let inputs = scales
        .iter()
        .map(|&s| {
            let (nh, nw) = input_size(h, w, s, opts.long_side, patch);
            resized_input(image, nh, nw)
        })
        .collect::<Result<Vec<_>>>()?;
    classes
        .iter()
        .map(|&c| {
            let per_scale = inputs
                .iter()
                .map(|input| {
                    let map = explain(opts.explainer, model, input, c, &opts.relevance)?;
                    to_pixel_map(&map, h, w)
                })
                .collect::<Result<Vec<_>>>()?;
            if per_scale.len() == 1 {
                Ok(per_scale.into_iter().next().expect("one scale"))
            } else {
                multi_scale_fuse(&per_scale)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageLabel {
    pub label: PseudoLabel,
    /// Per-class EPOM threshold; empty when EPOM is off.
    pub thresholds: BTreeMap<usize, f64>,
    pub maps: RefinedAttentionStack,
}

/// Full per-image pipeline. `saliency` is required when saliency gating is on.
pub fn pseudo_label_image(
    model: &ViTModel,
    image: &Tensor,
    saliency: Option<&[f64]>,
    classes: &[usize],
    opts: &LabelOptions,
) -> Result<ImageLabel> {
    let mut classes = classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let normalized = class_maps(model, image, &classes, opts)?;
    let maps = RefinedAttentionStack::new(h, w, classes.clone(), normalized, opts.soft_erase_rate)?;
    let initial = if opts.use_saliency {
        let sal = saliency.ok_or_else(|| Error::Usage("saliency map required".into()))?;
        initial_pseudo_label(&maps, sal, &classes, &opts.epom)?
    } else {
        initial_pseudo_label_no_saliency(&maps, &classes, &opts.epom)?
    };
    let (label, thresholds) = if opts.use_epom {
        let out = epom_refine(&initial, &maps, &classes, &opts.epom)?;
        (out.label, out.thresholds)
    } else {
        (initial, BTreeMap::new())
    };
    Ok(ImageLabel {
        label,
        thresholds,
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_size_snaps_to_patch_multiple() {
        assert_eq!(input_size(64, 64, 1.0, None, 8), (64, 64));
        assert_eq!(input_size(64, 64, 0.75, None, 8), (48, 48));
        assert_eq!(input_size(64, 64, 1.25, None, 8), (80, 80));
        assert_eq!(input_size(40, 80, 1.0, Some(160), 8), (80, 160));
        assert_eq!(input_size(3, 3, 1.0, None, 8), (8, 8));
    }

    #[test]
    fn option_validation() {
        let bad = LabelOptions {
            soft_erase_rate: 1.5,
            ..LabelOptions::default()
        };
        assert!(bad.validate().is_err());
        assert!(LabelOptions::default().validate().is_ok());
    }
}
