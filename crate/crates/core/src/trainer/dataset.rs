//! Synthetic shapes: coloured disks, squares, triangles and diamonds on a
//! textured background, with exact masks and a simulated saliency detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;
use crate::tensor::Tensor;

/// Label id for background pixels; foreground class `k` has label id `k + 1`.
pub const BACKGROUND: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Diamond,
}

pub const SHAPES: [ShapeKind; 4] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Diamond,
];

const COLORS: [[f64; 3]; 4] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.15],
];

impl ShapeKind {
    /// Whether `(x, y)` relative to the shape center lies inside a shape of half-extent `r`.
    fn contains(self, x: f64, y: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => x * x + y * y <= r * r,
            ShapeKind::Square => x.abs() <= r * 0.8 && y.abs() <= r * 0.8,
            ShapeKind::Diamond => x.abs() + y.abs() <= r,
            ShapeKind::Triangle => {
                // apex up, base at y = r/2, circumradius r
                let base = 0.5 * r;
                let half_width = (y + r) / (1.5 * r) * (r * 3f64.sqrt() / 2.0);
                y >= -r && y <= base && x.abs() <= half_width
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Amplitude of the smooth error field added to the saliency map.
    pub saliency_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            max_shapes: 3,
            min_radius: 8.0,
            max_radius: 14.0,
            saliency_noise: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=SHAPES.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={}, got {}",
                SHAPES.len(),
                self.num_classes
            )));
        }
        if self.max_shapes == 0 || self.max_shapes > self.num_classes {
            return Err(Error::Config("max_shapes must be in 1..=num_classes".into()));
        }
        if !(self.min_radius > 1.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Config("radius range is invalid".into()));
        }
        if 2.0 * self.max_radius + 2.0 > self.image_size as f64 {
            return Err(Error::Config("shapes do not fit in the image".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values are multiples of 1/255 in [0, 1].
    pub image: Tensor,
    /// Multi-hot over foreground classes.
    pub labels: Vec<f64>,
    /// `H×W` label ids, 0 = background.
    pub gt_mask: Vec<u8>,
    /// `H×W` foreground probability in [0, 1], multiples of 1/255.
    pub saliency: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    /// Foreground class indices with a positive label.
    pub fn present_classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0.5)
            .map(|(k, _)| k)
            .collect()
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Box blur with clamped borders.
fn box_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for d in -r..=r {
                    let (sx, sy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    let sx = sx.clamp(0, w as isize - 1) as usize;
                    let sy = sy.clamp(0, h as isize - 1) as usize;
                    acc += src[sy * w + sx];
                }
                out[y as usize * w + x as usize] = acc / (2 * r + 1) as f64;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn smooth_field(rng: &mut ChaCha8Rng, cells: usize, h: usize, w: usize) -> Vec<f64> {
    let coarse: Vec<f64> = (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
    resize_bilinear(&coarse, cells, cells, h, w)
}

struct Placed {
    kind: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

fn generate_one(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Sample {
    let n = cfg.image_size;
    let np = n * n;

    // distinct classes, 1..=max_shapes of them
    let count = rng.random_range(1..=cfg.max_shapes);
    let mut classes: Vec<usize> = (0..cfg.num_classes).collect();
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let mut placed: Vec<Placed> = Vec::new();
    for &kind in classes.iter().take(count) {
        for _ in 0..200 {
            let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
            let lo = r + 1.0;
            let hi = n as f64 - r - 1.0;
            let cx = rng.random_range(lo..hi);
            let cy = rng.random_range(lo..hi);
            let clear = placed
                .iter()
                .all(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() > p.r + r + 2.0);
            if clear {
                placed.push(Placed { kind, cx, cy, r });
                break;
            }
        }
    }

    // background texture: grey level, smooth field, fine noise, slight tint
    let base = rng.random_range(0.3..0.6);
    let field = smooth_field(rng, 4, n, n);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let mut image = vec![0.0; 3 * np];
    for i in 0..np {
        let grain = rng.random_range(-0.06..0.06);
        for c in 0..3 {
            image[c * np + i] = base + 0.12 * field[i] + grain + tint[c];
        }
    }

    let mut mask = vec![BACKGROUND; np];
    let mut labels = vec![0.0; cfg.num_classes];
    for p in &placed {
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
        let color: [f64; 3] = std::array::from_fn(|c| COLORS[p.kind][c] + jitter[c]);
        let shape = SHAPES[p.kind];
        let mut any = false;
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 + 0.5 - p.cx;
                let dy = y as f64 + 0.5 - p.cy;
                if shape.contains(dx, dy, p.r) {
                    let i = y * n + x;
                    mask[i] = p.kind as u8 + 1;
                    any = true;
                    let grain = rng.random_range(-0.05..0.05);
                    for c in 0..3 {
                        image[c * np + i] = color[c] + grain;
                    }
                }
            }
        }
        if any {
            labels[p.kind] = 1.0;
        }
    }
    for v in &mut image {
        *v = quantize(*v);
    }

    let fg: Vec<f64> = mask.iter().map(|&m| f64::from(m != BACKGROUND)).collect();
    let blurred = box_blur(&fg, n, n, 2);
    let err = smooth_field(rng, 8, n, n);
    let saliency = blurred
        .iter()
        .zip(&err)
        .map(|(b, e)| quantize(b + cfg.saliency_noise * e))
        .collect();

    Sample {
        image: Tensor::new(vec![3, n, n], image).expect("image shape"),
        labels,
        gt_mask: mask,
        saliency,
        height: n,
        width: n,
    }
}

/// `n` samples, deterministic in `seed`. Sample `i` depends only on
/// `(config, seed, i)`.
pub fn synth_dataset(n: usize, config: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(config, &mut rng)
        })
        .collect())
}
