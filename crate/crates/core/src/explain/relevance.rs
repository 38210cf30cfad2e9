//! Relevance propagation rules for the transformer: alpha-beta (α=1, β=0)
//! for linear layers, the proportional bilinear rule for both attention
//! products, normalized splitting at residual adds, and identity through
//! layer norms, GELU and softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ForwardPass, ViTModel};

/// Which blocks contribute to the class attention map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSet {
    Last,
    All,
    Explicit(Vec<usize>),
}

impl BlockSet {
    /// Sorted, de-duplicated block indices for a model with `num_blocks` blocks.
    pub fn resolve(&self, num_blocks: usize) -> Result<Vec<usize>> {
        let mut blocks = match self {
            BlockSet::Last => vec![num_blocks.saturating_sub(1)],
            BlockSet::All => (0..num_blocks).collect(),
            BlockSet::Explicit(v) => v.clone(),
        };
        blocks.sort_unstable();
        blocks.dedup();
        if blocks.is_empty() || num_blocks == 0 {
            return Err(Error::Usage("block set is empty".into()));
        }
        if let Some(b) = blocks.iter().find(|&&b| b >= num_blocks) {
            return Err(Error::Usage(format!(
                "block {b} out of range for a {num_blocks}-block model"
            )));
        }
        Ok(blocks)
    }

    /// Parses `last`, `all` or a comma-separated list of block indices.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "last" => Ok(BlockSet::Last),
            "all" => Ok(BlockSet::All),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Usage(format!("invalid block index {p:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(BlockSet::Explicit),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelevanceConfig {
    /// Stabilizer added to denominators of the division-based rules.
    pub eps: f64,
    /// Zero negative `∇M ⊙ R` entries before averaging heads.
    pub positive_clamp: bool,
    pub blocks: BlockSet,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            eps: 1e-9,
            positive_clamp: true,
            blocks: BlockSet::Last,
        }
    }
}

/// Relevance at every annotated activation, from the logits down to the tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceState {
    /// `R^b` per block, `h×n×n`, for the post-softmax attention.
    pub attention: Vec<Tensor>,
    /// Relevance of each block's input tokens, `n×d`.
    pub block_inputs: Vec<Tensor>,
    /// Relevance of the final features (only the class row is non-zero).
    pub features: Tensor,
}

/// `num / den` with a sign-matched stabilizer: the denominator becomes
/// `den + eps·sign(den)`, and entries with `den == 0` yield 0.
pub fn safe_div(num: f64, den: f64, eps: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / (den + eps.copysign(den))
    }
}

fn div_elementwise(r: &Tensor, z: &Tensor, eps: f64) -> Tensor {
    r.zip_map(z, |a, b| safe_div(a, b, eps)).expect("same shapes")
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x * y).expect("same shapes")
}

/// Alpha-beta rule with α=1, β=0 for `y = x · W` (bias excluded):
/// relevance flows through the positive contributions `x⁺W⁺` and `x⁻W⁻`.
pub fn linear_relprop(x: &Tensor, w: &Tensor, r: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() || r.shape() != [x.rows(), w.cols()] {
        return Err(Error::shape("linear_relprop", x.shape(), w.shape()));
    }
    let px = x.map(|v| v.max(0.0));
    let nx = x.map(|v| v.min(0.0));
    let pw = w.map(|v| v.max(0.0));
    let nw = w.map(|v| v.min(0.0));
    let z = px.matmul(&pw)?.zip_map(&nx.matmul(&nw)?, |a, b| a + b)?;
    let s = div_elementwise(r, &z, eps);
    let c1 = hadamard(&px, &s.matmul(&pw.transpose()?)?);
    let c2 = hadamard(&nx, &s.matmul(&nw.transpose()?)?);
    c1.zip_map(&c2, |a, b| a + b)
}

/// Proportional rule for `z = a · b`: every factor receives the full relevance.
pub fn matmul_relprop(a: &Tensor, b: &Tensor, r: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let z = a.matmul(b)?;
    if z.shape() != r.shape() {
        return Err(Error::shape("matmul_relprop", z.shape(), r.shape()));
    }
    let s = div_elementwise(r, &z, eps);
    let ra = hadamard(a, &s.matmul(&b.transpose()?)?);
    let rb = hadamard(b, &a.transpose()?.matmul(&s)?);
    Ok((ra, rb))
}

/// Residual `z = a + b`: proportional split, then both branches are rescaled
/// so their totals divide `Σr` in the ratio `|Σr_a| : |Σr_b|`.
pub fn add_relprop(a: &Tensor, b: &Tensor, r: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let z = a.zip_map(b, |x, y| x + y)?;
    let s = div_elementwise(r, &z, eps);
    let ra = hadamard(a, &s);
    let rb = hadamard(b, &s);
    let (sa, sb, total) = (ra.sum(), rb.sum(), r.sum());
    let fa = safe_div(sa.abs(), sa.abs() + sb.abs(), eps) * total;
    let fb = safe_div(sb.abs(), sa.abs() + sb.abs(), eps) * total;
    let ka = safe_div(fa, sa, eps);
    let kb = safe_div(fb, sb, eps);
    Ok((ra.map(|v| v * ka), rb.map(|v| v * kb)))
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x + y).expect("same shapes")
}

/// Propagates the one-hot relevance of `class` from the logits down through
/// the head and every block of a recorded forward pass.
pub fn relevance_propagate(
    model: &ViTModel,
    pass: &ForwardPass,
    class: usize,
    config: &RelevanceConfig,
) -> Result<RelevanceState> {
    if !pass.recorded {
        return Err(Error::Usage(
            "relevance propagation needs a forward pass with recorded attention".into(),
        ));
    }
    let cfg = &model.config;
    if class >= cfg.num_classes {
        return Err(Error::Usage(format!(
            "class {class} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let eps = config.eps;
    let g = &pass.graph;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();

    let mut one_hot = Tensor::zeros(&[1, cfg.num_classes]);
    one_hot.data_mut()[class] = 1.0;
    let features = g.value(pass.features);
    let cls_feature = features.slice_rows(0, 1)?;
    let r_cls = linear_relprop(&cls_feature, &model.head_weight, &one_hot, eps)?;
    let n = features.rows();
    let mut r_feat = Tensor::zeros(&[n, d]);
    r_feat.data_mut()[..d].copy_from_slice(r_cls.data());
    let r_features = r_feat.clone();

    // final layer norm passes relevance through unchanged
    let mut r = r_feat;
    let mut attention = vec![Tensor::zeros(&[1]); cfg.num_blocks];
    let mut block_inputs = vec![Tensor::zeros(&[1]); cfg.num_blocks];
    for (b, (bv, params)) in pass.blocks.iter().zip(&model.blocks).enumerate().rev() {
        // output = resid + mlp
        let (r_resid, r_mlp) = add_relprop(g.value(bv.resid), g.value(bv.fc2), &r, eps)?;
        let r_act = linear_relprop(g.value(bv.act), &params.fc2_weight, &r_mlp, eps)?;
        let r_ln2 = linear_relprop(g.value(bv.ln2), &params.fc1_weight, &r_act, eps)?;
        let r_mid = add(&r_resid, &r_ln2);

        // resid = input + attention branch
        let (r_in, r_attn) = add_relprop(g.value(bv.input), g.value(bv.proj), &r_mid, eps)?;
        let r_concat = linear_relprop(g.value(bv.concat), &params.proj_weight, &r_attn, eps)?;
        let mut r_qkv = Tensor::zeros(&[n, 3 * d]);
        let mut heads = Vec::with_capacity(bv.heads.len());
        for (h, hv) in bv.heads.iter().enumerate() {
            let r_out = r_concat.slice_cols(h * dh, (h + 1) * dh)?;
            let (r_m, r_v) = matmul_relprop(g.value(hv.attn), g.value(hv.v), &r_out, eps)?;
            let r_m = r_m.map(|v| v / 2.0);
            let r_v = r_v.map(|v| v / 2.0);
            let k_t = g.value(hv.k).transpose()?;
            let (r_q, r_kt) = matmul_relprop(g.value(hv.q), &k_t, &r_m, eps)?;
            let r_q = r_q.map(|v| v / 2.0);
            let r_k = r_kt.transpose()?.map(|v| v / 2.0);
            for i in 0..n {
                let row = &mut r_qkv.data_mut()[i * 3 * d..(i + 1) * 3 * d];
                for j in 0..dh {
                    row[h * dh + j] = r_q.at2(i, j);
                    row[d + h * dh + j] = r_k.at2(i, j);
                    row[2 * d + h * dh + j] = r_v.at2(i, j);
                }
            }
            heads.push(r_m);
        }
        let r_ln1 = linear_relprop(g.value(bv.ln1), &params.qkv_weight, &r_qkv, eps)?;
        r = add(&r_in, &r_ln1);

        let head_refs: Vec<&Tensor> = heads.iter().collect();
        attention[b] = stack(&head_refs);
        block_inputs[b] = r.clone();
    }
    Ok(RelevanceState {
        attention,
        block_inputs,
        features: r_features,
    })
}

pub(crate) fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("stacked parts share a shape")
}
