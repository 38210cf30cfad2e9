//! A small DeiT-style vision transformer: patch embedding, class token,
//! learned positional embeddings, pre-norm attention blocks and a linear head
//! on the class token.

mod forward;
mod weights;

pub use forward::{forward, patchify, AttentionTrace, BlockVars, ForwardPass, HeadVars};
pub use weights::{load_weights, save_weights};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 6,
            mlp_ratio: 4,
            num_classes: 3,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} does not divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `s`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `s + 1`, counting the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `d × 3d`, columns ordered as [q | k | v], heads contiguous inside each.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// Weights are stored input-major: a linear layer computes `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        };
    }
    t
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    t
}

impl ViTModel {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let patch_weight = trunc_normal(&mut rng, &[config.patch_dim(), d], INIT_STD);
        let cls_token = normal(&mut rng, &[1, d], INIT_STD);
        let pos_embed = normal(&mut rng, &[config.seq_len(), d], INIT_STD);
        let blocks = (0..config.num_blocks)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::full(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                qkv_weight: trunc_normal(&mut rng, &[d, 3 * d], INIT_STD),
                qkv_bias: Tensor::zeros(&[3 * d]),
                proj_weight: trunc_normal(&mut rng, &[d, d], INIT_STD),
                proj_bias: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::full(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                fc1_weight: trunc_normal(&mut rng, &[d, hidden], INIT_STD),
                fc1_bias: Tensor::zeros(&[hidden]),
                fc2_weight: trunc_normal(&mut rng, &[hidden, d], INIT_STD),
                fc2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let head_weight = trunc_normal(&mut rng, &[d, config.num_classes], INIT_STD);
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            cls_token,
            pos_embed,
            blocks,
            norm_gamma: Tensor::full(&[d], 1.0),
            norm_beta: Tensor::zeros(&[d]),
            head_weight,
            head_bias: Tensor::zeros(&[config.num_classes]),
            config,
        })
    }

    /// Expected `(name, shape)` of every parameter for `config`, in canonical order.
    pub fn param_layout(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![config.seq_len(), d]),
        ];
        for b in 0..config.num_blocks {
            let p = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                (p("norm1.weight"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.weight"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, hidden]),
                (p("mlp.fc1.bias"), vec![hidden]),
                (p("mlp.fc2.weight"), vec![hidden, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.weight".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, config.num_classes]),
            ("head.bias".to_string(), vec![config.num_classes]),
        ]);
        out
    }

    /// All parameters in the order of [`ViTModel::param_layout`].
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.patch_weight,
            &self.patch_bias,
            &self.cls_token,
            &self.pos_embed,
        ];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gamma,
                &b.ln1_beta,
                &b.qkv_weight,
                &b.qkv_bias,
                &b.proj_weight,
                &b.proj_bias,
                &b.ln2_gamma,
                &b.ln2_beta,
                &b.fc1_weight,
                &b.fc1_bias,
                &b.fc2_weight,
                &b.fc2_bias,
            ]);
        }
        out.extend([
            &self.norm_gamma,
            &self.norm_beta,
            &self.head_weight,
            &self.head_bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.qkv_weight,
                &mut b.qkv_bias,
                &mut b.proj_weight,
                &mut b.proj_bias,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
                &mut b.fc1_weight,
                &mut b.fc1_bias,
                &mut b.fc2_weight,
                &mut b.fc2_bias,
            ]);
        }
        out.extend([
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    /// Rebuilds a model from parameters in canonical order.
    pub fn from_params(config: ViTConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Self::param_layout(&config);
        if params.len() != layout.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, config requires {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut model = Self::new(config, 0)?;
        for (dst, src) in model.params_mut().into_iter().zip(params) {
            *dst = src;
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = ViTModel::new(ViTConfig::default(), 7).unwrap();
        let b = ViTModel::new(ViTConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = ViTModel::new(ViTConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn derived_sizes() {
        let cfg = ViTConfig {
            image_size: 32,
            patch_size: 16,
            embed_dim: 8,
            num_heads: 2,
            ..ViTConfig::default()
        };
        assert_eq!(cfg.head_dim(), 4);
        assert_eq!(cfg.num_patches(), 4);
        assert_eq!(cfg.seq_len(), 5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_patch = ViTConfig {
            patch_size: 7,
            ..ViTConfig::default()
        };
        assert!(matches!(ViTModel::new(bad_patch, 0), Err(Error::Config(_))));
        let bad_heads = ViTConfig {
            num_heads: 5,
            ..ViTConfig::default()
        };
        assert!(matches!(ViTModel::new(bad_heads, 0), Err(Error::Config(_))));
        let zero = ViTConfig {
            num_blocks: 0,
            ..ViTConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn layout_matches_params() {
        let m = ViTModel::new(ViTConfig::default(), 1).unwrap();
        let layout = ViTModel::param_layout(&m.config);
        let params = m.params();
        assert_eq!(layout.len(), params.len());
        for ((_, shape), p) in layout.iter().zip(params) {
            assert_eq!(p.shape(), shape.as_slice());
        }
    }

    #[test]
    fn init_statistics() {
        let m = ViTModel::new(ViTConfig::default(), 3).unwrap();
        let w = m.blocks[0].fc1_weight.data();
        assert!(w.iter().all(|v| v.abs() <= 0.04));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        // truncation at 2σ shrinks the std by ~12%
        assert!((std - 0.0176).abs() < 0.001, "{std}");
        assert!(m.blocks[0].qkv_bias.data().iter().all(|&v| v == 0.0));
    }
}
