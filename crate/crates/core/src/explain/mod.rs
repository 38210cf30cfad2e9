//! Per-class initial attention maps on the patch grid.
//!
//! [`dtd_attention`] is the relevance-based method; [`rollout_attention`] and
//! [`cam_attention`] are the comparison baselines.

mod relevance;

pub use relevance::{
    add_relprop, linear_relprop, matmul_relprop, relevance_propagate, safe_div, BlockSet,
    RelevanceConfig, RelevanceState,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{AttentionTrace, ForwardPass, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Explainer {
    Dtd,
    Rollout,
    Cam,
}

impl Explainer {
    pub const ALL: [Explainer; 3] = [Explainer::Dtd, Explainer::Rollout, Explainer::Cam];

    pub fn name(self) -> &'static str {
        match self {
            Explainer::Dtd => "dtd",
            Explainer::Rollout => "rollout",
            Explainer::Cam => "cam",
        }
    }
}

impl std::str::FromStr for Explainer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dtd" => Ok(Explainer::Dtd),
            "rollout" => Ok(Explainer::Rollout),
            "cam" => Ok(Explainer::Cam),
            other => Err(Error::Usage(format!("unknown explainer {other:?}"))),
        }
    }
}

/// A response map on the patch grid, row-major `rows×cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialAttentionMap {
    /// `None` for class-agnostic maps.
    pub class: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// `S = Σ(L ⊙ O)` with `L` the one-hot row for `class`.
pub fn class_score(g: &mut Graph, logits: Var, class: usize) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let c = *shape.last().unwrap_or(&0);
    if class >= c {
        return Err(Error::Usage(format!("class {class} out of range for {c} logits")));
    }
    let mut one_hot = Tensor::zeros(&shape);
    one_hot.data_mut()[class] = 1.0;
    let l = g.constant(one_hot);
    let masked = g.mul(l, logits)?;
    Ok(g.sum(masked))
}

/// `I + mean_heads(∇M ⊙ R)`, optionally clamping negative products first.
pub fn block_attribution(grad: &Tensor, relevance: &Tensor, positive_clamp: bool) -> Result<Tensor> {
    if grad.shape() != relevance.shape() || grad.rank() != 3 {
        return Err(Error::shape("block_attribution", grad.shape(), relevance.shape()));
    }
    let (h, n) = (grad.shape()[0], grad.shape()[1]);
    let mut out = Tensor::eye(n);
    let inv = 1.0 / h as f64;
    for head in 0..h {
        let off = head * n * n;
        for j in 0..n * n {
            let mut v = grad.data()[off + j] * relevance.data()[off + j];
            if positive_clamp {
                v = v.max(0.0);
            }
            out.data_mut()[j] += v * inv;
        }
    }
    Ok(out)
}

/// Later blocks multiply on the left: `A^{b_k} · … · A^{b_1}`.
fn chain(mats: impl IntoIterator<Item = Tensor>) -> Result<Tensor> {
    let mut it = mats.into_iter();
    let mut joint = it
        .next()
        .ok_or_else(|| Error::Usage("block set is empty".into()))?;
    for m in it {
        joint = m.matmul(&joint)?;
    }
    Ok(joint)
}

fn cls_patch_row(joint: &Tensor, class: Option<usize>, grid: (usize, usize)) -> InitialAttentionMap {
    let n = joint.cols();
    InitialAttentionMap {
        class,
        rows: grid.0,
        cols: grid.1,
        values: joint.row(0)[1..n].to_vec(),
    }
}

/// DTD map plus the filled trace it was computed from.
pub fn dtd_attention_with_trace(
    model: &ViTModel,
    image: &Tensor,
    class: usize,
    config: &RelevanceConfig,
) -> Result<(InitialAttentionMap, AttentionTrace)> {
    let blocks = config.blocks.resolve(model.config.num_blocks)?;
    let mut pass = ForwardPass::run(model, image, true, false)?;
    let score = class_score(&mut pass.graph, pass.logits, class)?;
    pass.graph.backward(score)?;
    let state = relevance_propagate(model, &pass, class, config)?;
    let mut trace = pass.trace().expect("forward pass was recorded");
    trace.relevance = state.attention.into_iter().map(Some).collect();

    let mats = blocks
        .iter()
        .map(|&b| {
            let grad = trace.attention_grad[b]
                .as_ref()
                .ok_or_else(|| Error::Usage("attention gradient missing".into()))?;
            let rel = trace.relevance[b].as_ref().expect("relevance just filled");
            block_attribution(grad, rel, config.positive_clamp)
        })
        .collect::<Result<Vec<_>>>()?;
    let joint = chain(mats)?;
    Ok((cls_patch_row(&joint, Some(class), pass.grid), trace))
}

pub fn dtd_attention(
    model: &ViTModel,
    image: &Tensor,
    class: usize,
    config: &RelevanceConfig,
) -> Result<InitialAttentionMap> {
    Ok(dtd_attention_with_trace(model, image, class, config)?.0)
}

fn row_normalize(mut t: Tensor) -> Tensor {
    let n = t.cols();
    for row in t.data_mut().chunks_exact_mut(n) {
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    t
}

/// `row_normalize(I + mean_heads(M))` for one `h×n×n` attention tensor.
pub fn rollout_step(attention: &Tensor) -> Tensor {
    let (h, n) = (attention.shape()[0], attention.shape()[1]);
    let mut out = Tensor::eye(n);
    let inv = 1.0 / h as f64;
    for head in attention.data().chunks_exact(n * n) {
        out.data_mut()
            .iter_mut()
            .zip(head)
            .for_each(|(o, v)| *o += v * inv);
    }
    row_normalize(out)
}

/// Rollout of a recorded trace: the product of all normalized steps.
pub fn rollout_from_trace(trace: &AttentionTrace, grid: (usize, usize)) -> Result<InitialAttentionMap> {
    let joint = chain(trace.attention.iter().map(rollout_step))?;
    Ok(cls_patch_row(&joint, None, grid))
}

/// Class-agnostic attention rollout.
pub fn rollout_attention(model: &ViTModel, image: &Tensor) -> Result<InitialAttentionMap> {
    let pass = ForwardPass::run(model, image, true, false)?;
    let trace = pass.trace().expect("forward pass was recorded");
    rollout_from_trace(&trace, pass.grid)
}

/// Head weights for `class` dotted with each final patch-token feature.
pub fn cam_from_features(
    model: &ViTModel,
    features: &Tensor,
    class: usize,
    grid: (usize, usize),
) -> Result<InitialAttentionMap> {
    let c = model.config.num_classes;
    if class >= c {
        return Err(Error::Usage(format!("class {class} out of range for {c} classes")));
    }
    let w = &model.head_weight;
    let values = (1..features.rows())
        .map(|p| {
            features
                .row(p)
                .iter()
                .enumerate()
                .map(|(j, f)| f * w.at2(j, class))
                .sum()
        })
        .collect();
    Ok(InitialAttentionMap {
        class: Some(class),
        rows: grid.0,
        cols: grid.1,
        values,
    })
}

pub fn cam_attention(model: &ViTModel, image: &Tensor, class: usize) -> Result<InitialAttentionMap> {
    let pass = ForwardPass::run(model, image, false, false)?;
    cam_from_features(model, pass.graph.value(pass.features), class, pass.grid)
}

/// Dispatches to the chosen explainer.
pub fn explain(
    explainer: Explainer,
    model: &ViTModel,
    image: &Tensor,
    class: usize,
    config: &RelevanceConfig,
) -> Result<InitialAttentionMap> {
    match explainer {
        Explainer::Dtd => dtd_attention(model, image, class, config),
        Explainer::Rollout => rollout_attention(model, image).map(|m| InitialAttentionMap {
            class: Some(class),
            ..m
        }),
        Explainer::Cam => cam_attention(model, image, class),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    fn tiny(blocks: usize) -> ViTConfig {
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

    fn image() -> Tensor {
        let data = (0..192).map(|i| ((i * 53) % 97) as f64 / 96.0).collect();
        Tensor::new(vec![3, 8, 8], data).unwrap()
    }

    #[test]
    fn class_score_selects_entry() {
        let mut g = Graph::new();
        let o = g.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
        let s = class_score(&mut g, o, 2).unwrap();
        assert_eq!(g.value(s).item(), 3.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(o).unwrap().data(), &[0.0, 0.0, 1.0]);

        let s0 = class_score(&mut g, o, 0).unwrap();
        g.backward(s0).unwrap();
        assert_eq!(g.grad(o).unwrap().data(), &[1.0, 0.0, 0.0]);

        let z = g.constant(Tensor::zeros(&[1, 3]));
        let s = class_score(&mut g, z, 1).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        assert!(class_score(&mut g, o, 3).is_err());
    }

    #[test]
    fn zero_attribution_gives_zero_map() {
        let zero = Tensor::zeros(&[2, 5, 5]);
        let a = block_attribution(&zero, &zero, true).unwrap();
        assert_eq!(a, Tensor::eye(5));
        let map = cls_patch_row(&a, Some(0), (2, 2));
        assert_eq!(map.values, vec![0.0; 4]);
    }

    #[test]
    fn dtd_map_has_patch_grid_shape() {
        let model = ViTModel::new(tiny(2), 3).unwrap();
        let map = dtd_attention(&model, &image(), 1, &RelevanceConfig::default()).unwrap();
        assert_eq!((map.rows, map.cols, map.values.len()), (2, 2, 4));
        assert!(map.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dtd_is_deterministic_and_rejects_bad_blocks() {
        let model = ViTModel::new(tiny(2), 3).unwrap();
        let cfg = RelevanceConfig {
            blocks: BlockSet::All,
            ..RelevanceConfig::default()
        };
        let a = dtd_attention(&model, &image(), 0, &cfg).unwrap();
        let b = dtd_attention(&model, &image(), 0, &cfg).unwrap();
        assert_eq!(a, b);
        let empty = RelevanceConfig {
            blocks: BlockSet::Explicit(vec![]),
            ..RelevanceConfig::default()
        };
        assert!(dtd_attention(&model, &image(), 0, &empty).is_err());
    }

    #[test]
    fn relevance_requires_recorded_trace() {
        let model = ViTModel::new(tiny(1), 3).unwrap();
        let pass = ForwardPass::run(&model, &image(), false, false).unwrap();
        assert!(relevance_propagate(&model, &pass, 0, &RelevanceConfig::default()).is_err());
    }

    #[test]
    fn identity_attention_rollout_is_zero() {
        let m = Tensor::new(vec![1, 5, 5], Tensor::eye(5).into_data()).unwrap();
        let step = rollout_step(&m);
        for row in step.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let trace = AttentionTrace {
            attention: vec![m],
            attention_grad: vec![None],
            relevance: vec![None],
            logits: Tensor::zeros(&[1, 1]),
            features: Tensor::zeros(&[5, 1]),
        };
        assert_eq!(rollout_from_trace(&trace, (2, 2)).unwrap().values, vec![0.0; 4]);
    }

    #[test]
    fn rollout_is_class_agnostic() {
        let model = ViTModel::new(tiny(2), 4).unwrap();
        let cfg = RelevanceConfig::default();
        let a = explain(Explainer::Rollout, &model, &image(), 0, &cfg).unwrap();
        let b = explain(Explainer::Rollout, &model, &image(), 2, &cfg).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn cam_zero_and_linear_in_head_weights() {
        let mut model = ViTModel::new(tiny(1), 4).unwrap();
        let base = cam_attention(&model, &image(), 1).unwrap();
        for j in 0..8 {
            let i = j * 3 + 1;
            model.head_weight.data_mut()[i] *= 2.0;
        }
        let doubled = cam_attention(&model, &image(), 1).unwrap();
        for (a, b) in base.values.iter().zip(&doubled.values) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
        model.head_weight = Tensor::zeros(&[8, 3]);
        assert!(cam_attention(&model, &image(), 1).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn explainer_names_parse() {
        for e in Explainer::ALL {
            assert_eq!(e.name().parse::<Explainer>().unwrap(), e);
        }
        assert!("gradcam".parse::<Explainer>().is_err());
    }
}
