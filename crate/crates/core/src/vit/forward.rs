use super::{ViTModel, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;
use crate::tensor::{Graph, Tensor, Var};

/// Splits a `C×H×W` image into non-overlapping `p×p` patches in raster order.
/// Each row is one patch flattened channel-major, then by row, then by column.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 || patch == 0 {
        return Err(Error::shape("patchify", image.shape(), &[patch]));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Usage(format!(
            "patch size {patch} does not divide image {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], out)
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Post-softmax attention `n×n`.
    pub attn: Var,
    /// `attn · v`
    pub out: Var,
}

/// Graph handles of every activation in one block, in forward order.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub input: Var,
    pub ln1: Var,
    pub qkv: Var,
    pub heads: Vec<HeadVars>,
    pub concat: Var,
    pub proj: Var,
    pub resid: Var,
    pub ln2: Var,
    pub fc1: Var,
    pub act: Var,
    pub fc2: Var,
    pub output: Var,
}

/// A forward pass together with the graph that produced it.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    /// Parameter handles in canonical order.
    pub params: Vec<Var>,
    pub blocks: Vec<BlockVars>,
    /// Final layer-normed token features, `n×d`.
    pub features: Var,
    pub logits: Var,
    /// Patch grid `(rows, cols)` of this input.
    pub grid: (usize, usize),
    pub recorded: bool,
}

/// Detached per-block attention record.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// `M^b` as `h×n×n`, one per block.
    pub attention: Vec<Tensor>,
    /// `∂S/∂M^b`, present after a backward pass.
    pub attention_grad: Vec<Option<Tensor>>,
    /// `R^b`, filled by relevance propagation.
    pub relevance: Vec<Option<Tensor>>,
    /// `1×c`
    pub logits: Tensor,
    /// Final token features `n×d` that feed the head (only the class row does).
    pub features: Tensor,
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("stacked parts share a shape")
}

/// Positional embeddings for a `gh×gw` patch grid. The class position is
/// kept; patch positions are bilinearly resampled when the grid differs from
/// the trained one.
fn pos_embed_for(model: &ViTModel, gh: usize, gw: usize) -> Result<Tensor> {
    let g = model.config.grid();
    let d = model.config.embed_dim;
    let pos = &model.pos_embed;
    let patch_part = pos.slice_rows(1, pos.rows())?.transpose()?;
    let mut out = vec![0.0; (gh * gw + 1) * d];
    out[..d].copy_from_slice(pos.row(0));
    for ch in 0..d {
        let plane = &patch_part.data()[ch * g * g..(ch + 1) * g * g];
        let resized = resize_bilinear(plane, g, g, gh, gw);
        for (i, v) in resized.into_iter().enumerate() {
            out[(i + 1) * d + ch] = v;
        }
    }
    Tensor::new(vec![gh * gw + 1, d], out)
}

impl ForwardPass {
    /// Runs the model on a `C×H×W` image.
    ///
    /// With `trainable`, parameters are graph leaves that receive gradients.
    /// With `record_attention`, every attention matrix is watched so a
    /// backward pass leaves `∂loss/∂M^b` on it.
    pub fn run(
        model: &ViTModel,
        image: &Tensor,
        record_attention: bool,
        trainable: bool,
    ) -> Result<Self> {
        let cfg = &model.config;
        if image.rank() != 3 || image.shape()[0] != cfg.in_channels {
            return Err(Error::shape(
                "forward",
                image.shape(),
                &[cfg.in_channels, cfg.image_size, cfg.image_size],
            ));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let p = cfg.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape("forward", image.shape(), &[cfg.in_channels, p, p]));
        }
        let grid = (h / p, w / p);

        let mut g = Graph::new();
        let bind = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut params: Vec<Var> = Vec::new();
        for (i, t) in model.params().into_iter().enumerate() {
            // Positional embeddings of a resized grid are derived values (no grad).
            if i == 3 && grid != (cfg.grid(), cfg.grid()) {
                let pos = pos_embed_for(model, grid.0, grid.1)?;
                params.push(g.constant(pos));
            } else {
                params.push(bind(&mut g, t));
            }
        }
        let block_param = |b: usize, j: usize| params[4 + 12 * b + j];
        let tail = 4 + 12 * cfg.num_blocks;

        let d = cfg.embed_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let patches = g.constant(patchify(image, p)?);
        let emb = g.matmul(patches, params[0])?;
        let emb = g.add_row(emb, params[1])?;
        let tokens = g.concat(&[params[2], emb], 0)?;
        let mut x = g.add(tokens, params[3])?;

        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let input = x;
            let ln1 = g.layer_norm(input, block_param(b, 0), block_param(b, 1), LAYER_NORM_EPS)?;
            let qkv = g.matmul(ln1, block_param(b, 2))?;
            let qkv = g.add_row(qkv, block_param(b, 3))?;
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for hd in 0..cfg.num_heads {
                let q = g.slice(qkv, 1, hd * dh, (hd + 1) * dh)?;
                let k = g.slice(qkv, 1, d + hd * dh, d + (hd + 1) * dh)?;
                let v = g.slice(qkv, 1, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, scale);
                let attn = g.softmax(scores, 1)?;
                if record_attention {
                    g.watch(attn)?;
                }
                let out = g.matmul(attn, v)?;
                heads.push(HeadVars { q, k, v, attn, out });
            }
            let outs: Vec<Var> = heads.iter().map(|hv| hv.out).collect();
            let concat = g.concat(&outs, 1)?;
            let proj = g.matmul(concat, block_param(b, 4))?;
            let proj = g.add_row(proj, block_param(b, 5))?;
            let resid = g.add(input, proj)?;
            let ln2 = g.layer_norm(resid, block_param(b, 6), block_param(b, 7), LAYER_NORM_EPS)?;
            let fc1 = g.matmul(ln2, block_param(b, 8))?;
            let fc1 = g.add_row(fc1, block_param(b, 9))?;
            let act = g.gelu(fc1);
            let fc2 = g.matmul(act, block_param(b, 10))?;
            let fc2 = g.add_row(fc2, block_param(b, 11))?;
            let output = g.add(resid, fc2)?;
            blocks.push(BlockVars {
                input,
                ln1,
                qkv,
                heads,
                concat,
                proj,
                resid,
                ln2,
                fc1,
                act,
                fc2,
                output,
            });
            x = output;
        }

        let features = g.layer_norm(x, params[tail], params[tail + 1], LAYER_NORM_EPS)?;
        let cls = g.slice(features, 0, 0, 1)?;
        let logits = g.matmul(cls, params[tail + 2])?;
        let logits = g.add_row(logits, params[tail + 3])?;
        if !g.value(logits).is_finite() {
            return Err(Error::NonFinite("logits"));
        }

        Ok(Self {
            graph: g,
            params,
            blocks,
            features,
            logits,
            grid,
            recorded: record_attention,
        })
    }

    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    /// Detaches the attention record. `None` unless attention was recorded.
    pub fn trace(&self) -> Option<AttentionTrace> {
        if !self.recorded {
            return None;
        }
        let g = &self.graph;
        let attention = self
            .blocks
            .iter()
            .map(|b| stack(&b.heads.iter().map(|h| g.value(h.attn)).collect::<Vec<_>>()))
            .collect();
        let attention_grad = self
            .blocks
            .iter()
            .map(|b| {
                let grads: Option<Vec<&Tensor>> = b.heads.iter().map(|h| g.grad(h.attn)).collect();
                grads.map(|gs| stack(&gs))
            })
            .collect();
        Some(AttentionTrace {
            attention,
            attention_grad,
            relevance: vec![None; self.blocks.len()],
            logits: self.logits().clone(),
            features: g.value(self.features).clone(),
        })
    }
}

/// Logits `1×c` and, when requested, the attention trace.
pub fn forward(
    model: &ViTModel,
    image: &Tensor,
    record_attention: bool,
) -> Result<(Tensor, Option<AttentionTrace>)> {
    let pass = ForwardPass::run(model, image, record_attention, false)?;
    Ok((pass.logits().clone(), pass.trace()))
}
