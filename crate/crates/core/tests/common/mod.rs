//! Shared test helpers: randomized toy models and a plain-loop ViT forward
//! pass that keeps every intermediate activation.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wegpipe::vit::{ViTConfig, ViTModel};
use wegpipe::Tensor;

pub mod relevance;

pub type Mat = Vec<Vec<f64>>;

pub fn toy_config(blocks: usize) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        in_channels: 3,
        embed_dim: 8,
        num_heads: 2,
        num_blocks: blocks,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

/// A model whose weights are large enough that every layer matters.
pub fn random_model(config: ViTConfig, seed: u64) -> ViTModel {
    let layout = ViTModel::param_layout(&config);
    let mut model = ViTModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for ((name, _), p) in layout.iter().zip(model.params_mut()) {
        let gamma = name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight";
        for v in p.data_mut() {
            *v = if gamma {
                1.0 + rng.random_range(-0.3..0.3)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    model
}

pub fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn vec1(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let mut y = matmul(x, &to_mat(w));
    for row in &mut y {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    y
}

fn layer_norm(x: &Mat, gamma: &Tensor, beta: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma.data()[j] + beta.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub struct HeadActs {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub attn: Mat,
    pub out: Mat,
}

pub struct BlockActs {
    pub input: Mat,
    pub ln1: Mat,
    pub heads: Vec<HeadActs>,
    pub concat: Mat,
    pub proj: Mat,
    pub resid: Mat,
    pub ln2: Mat,
    pub act: Mat,
    pub fc2: Mat,
    pub output: Mat,
}

pub struct Acts {
    pub blocks: Vec<BlockActs>,
    pub features: Mat,
    pub logits: Vec<f64>,
}

/// Straight-line forward pass for square inputs of the configured size.
pub fn reference_forward(model: &ViTModel, image: &Tensor) -> Acts {
    let cfg = &model.config;
    let (c, p, g) = (cfg.in_channels, cfg.patch_size, cfg.image_size / cfg.patch_size);
    let side = cfg.image_size;
    let (d, heads) = (cfg.embed_dim, cfg.num_heads);
    let dh = d / heads;
    let px = |ch: usize, y: usize, x: usize| image.data()[(ch * side + y) * side + x];

    let mut patches = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut row = Vec::new();
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        row.push(px(ch, gy * p + y, gx * p + x));
                    }
                }
            }
            patches.push(row);
        }
    }
    let emb = linear(&patches, &model.patch_weight, &model.patch_bias);
    let mut x: Mat = std::iter::once(vec1(&model.cls_token)).chain(emb).collect();
    let pos = to_mat(&model.pos_embed);
    x = add(&x, &pos);
    let n = x.len();

    let mut blocks = Vec::new();
    for bp in &model.blocks {
        let input = x.clone();
        let ln1 = layer_norm(&input, &bp.ln1_gamma, &bp.ln1_beta);
        let qkv = linear(&ln1, &bp.qkv_weight, &bp.qkv_bias);
        let mut head_acts = Vec::new();
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let cols = |off: usize| -> Mat {
                qkv.iter().map(|r| r[off + h * dh..off + (h + 1) * dh].to_vec()).collect()
            };
            let (q, k, v) = (cols(0), cols(d), cols(2 * d));
            let scale = 1.0 / (dh as f64).sqrt();
            let mut attn = matmul(&q, &transpose(&k));
            for row in &mut attn {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = ((*v - m) * scale).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            let out = matmul(&attn, &v);
            for i in 0..n {
                concat[i][h * dh..(h + 1) * dh].copy_from_slice(&out[i]);
            }
            head_acts.push(HeadActs { q, k, v, attn, out });
        }
        let proj = linear(&concat, &bp.proj_weight, &bp.proj_bias);
        let resid = add(&input, &proj);
        let ln2 = layer_norm(&resid, &bp.ln2_gamma, &bp.ln2_beta);
        let pre = linear(&ln2, &bp.fc1_weight, &bp.fc1_bias);
        let act: Mat = pre.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        let fc2 = linear(&act, &bp.fc2_weight, &bp.fc2_bias);
        let output = add(&resid, &fc2);
        x = output.clone();
        blocks.push(BlockActs {
            input,
            ln1,
            heads: head_acts,
            concat,
            proj,
            resid,
            ln2,
            act,
            fc2,
            output,
        });
    }
    let features = layer_norm(&x, &model.norm_gamma, &model.norm_beta);
    let logits = linear(&features[..1].to_vec(), &model.head_weight, &model.head_bias).remove(0);
    Acts {
        blocks,
        features,
        logits,
    }
}
