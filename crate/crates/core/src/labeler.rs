//! Pseudo labels from refined attention maps, saliency gating and potential
//! object mining (EPOM): background pixels whose class response is
//! suspiciously high become ignored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::RefinedAttentionStack;

pub const BACKGROUND: u8 = 0;
pub const IGNORED: u8 = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpomConfig {
    /// Response above which a pixel counts as foreground evidence.
    pub fg_thr: f64,
    /// Pixels with saliency below this are background.
    pub tau_sal: f64,
}

impl Default for EpomConfig {
    fn default() -> Self {
        Self {
            fg_thr: 0.3,
            tau_sal: 0.5,
        }
    }
}

impl EpomConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fg_thr", self.fg_thr), ("tau_sal", self.tau_sal)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Initial,
    EpomIgnored,
}

/// Label ids per pixel: 0 background, `k + 1` for class `k`, 255 ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl PseudoLabel {
    pub fn new(height: usize, width: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::shape("PseudoLabel", &[height, width], &[grid.len()]));
        }
        let provenance = vec![Provenance::Initial; grid.len()];
        Ok(Self {
            height,
            width,
            grid,
            provenance,
        })
    }
}

pub fn label_id(class: usize) -> u8 {
    u8::try_from(class + 1).expect("class index fits a label id")
}

fn check_maps<'a>(maps: &'a RefinedAttentionStack, present: &[usize]) -> Result<Vec<(usize, &'a [f64])>> {
    let mut classes = present.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            maps.map_for(c)
                .map(|m| (c, m))
                .ok_or_else(|| Error::Usage(format!("no attention map for class {c}")))
        })
        .collect()
}

/// Argmax over present classes at each pixel, with ties to the lowest class.
/// `is_background(pixel, best_value)` overrides the argmax.
fn argmax_label(
    maps: &RefinedAttentionStack,
    present: &[usize],
    is_background: impl Fn(usize, f64) -> bool,
) -> Result<PseudoLabel> {
    let maps_by_class = check_maps(maps, present)?;
    let n = maps.height * maps.width;
    let grid = (0..n)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for &(c, m) in &maps_by_class {
                if best.is_none_or(|(_, v)| m[i] > v) {
                    best = Some((c, m[i]));
                }
            }
            match best {
                Some((c, v)) if v > 0.0 && !is_background(i, v) => label_id(c),
                _ => BACKGROUND,
            }
        })
        .collect();
    PseudoLabel::new(maps.height, maps.width, grid)
}

/// Saliency-gated argmax labeling.
pub fn initial_pseudo_label(
    maps: &RefinedAttentionStack,
    saliency: &[f64],
    present: &[usize],
    config: &EpomConfig,
) -> Result<PseudoLabel> {
    if saliency.len() != maps.height * maps.width {
        return Err(Error::shape(
            "initial_pseudo_label",
            &[maps.height, maps.width],
            &[saliency.len()],
        ));
    }
    argmax_label(maps, present, |i, _| saliency[i] < config.tau_sal)
}

/// Labeling without saliency: background wherever the best response is
/// below `fg_thr`.
pub fn initial_pseudo_label_no_saliency(
    maps: &RefinedAttentionStack,
    present: &[usize],
    config: &EpomConfig,
) -> Result<PseudoLabel> {
    argmax_label(maps, present, |_, v| v < config.fg_thr)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Top-quartile value: ascending order, zero-based index `⌈0.75·n⌉`
/// clamped to the last element.
fn top_quartile(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let idx = (3 * v.len()).div_ceil(4).min(v.len() - 1);
    v[idx]
}

/// Median response over pixels labeled `class`, or the top quartile of the
/// responses above `fg_thr` when the class has no pixels. 1 if neither exists.
pub fn class_threshold(label: &PseudoLabel, map: &[f64], class: usize, fg_thr: f64) -> f64 {
    let id = label_id(class);
    let own: Vec<f64> = label
        .grid
        .iter()
        .zip(map)
        .filter(|(&p, _)| p == id)
        .map(|(_, &a)| a)
        .collect();
    if !own.is_empty() {
        return median(own);
    }
    let strong: Vec<f64> = map.iter().copied().filter(|&a| a > fg_thr).collect();
    if strong.is_empty() {
        1.0
    } else {
        top_quartile(strong)
    }
}

/// Refined label plus the threshold used for each class.
#[derive(Clone, Debug, PartialEq)]
pub struct EpomOutput {
    pub label: PseudoLabel,
    pub thresholds: BTreeMap<usize, f64>,
}

/// Marks background pixels with `A^c > thr^c` as ignored. Thresholds come
/// from the input label only, so class order does not matter.
pub fn epom_refine(
    label: &PseudoLabel,
    maps: &RefinedAttentionStack,
    present: &[usize],
    config: &EpomConfig,
) -> Result<EpomOutput> {
    let maps_by_class = check_maps(maps, present)?;
    if label.grid.len() != maps.height * maps.width {
        return Err(Error::shape(
            "epom_refine",
            &[maps.height, maps.width],
            &[label.height, label.width],
        ));
    }
    let thresholds: BTreeMap<usize, f64> = maps_by_class
        .iter()
        .map(|&(c, m)| (c, class_threshold(label, m, c, config.fg_thr)))
        .collect();
    let mut out = label.clone();
    for &(c, m) in &maps_by_class {
        let thr = thresholds[&c];
        for i in 0..out.grid.len() {
            if label.grid[i] == BACKGROUND && m[i] > thr {
                out.grid[i] = IGNORED;
                out.provenance[i] = Provenance::EpomIgnored;
            }
        }
    }
    Ok(EpomOutput {
        label: out,
        thresholds,
    })
}

/// Threshold labeling without saliency followed by the same refinement.
pub fn epom_no_saliency(
    maps: &RefinedAttentionStack,
    present: &[usize],
    config: &EpomConfig,
) -> Result<EpomOutput> {
    let initial = initial_pseudo_label_no_saliency(maps, present, config)?;
    epom_refine(&initial, maps, present, config)
}

/// Sidecar record: thresholds keyed by label id.
pub fn thresholds_json(thresholds: &BTreeMap<usize, f64>) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = thresholds
        .iter()
        .map(|(&c, &t)| (label_id(c).to_string(), serde_json::json!(t)))
        .collect();
    serde_json::Value::Object(map)
}
