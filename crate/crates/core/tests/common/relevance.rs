//! Rule-by-rule relevance propagation over the loop forward pass.

use wegpipe::vit::ViTModel;
use wegpipe::Tensor;

use super::{reference_forward, to_mat, Mat};

const EPS: f64 = 1e-9;

fn sdiv(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else if b > 0.0 {
        a / (b + EPS)
    } else {
        a / (b - EPS)
    }
}

/// `y = x·W`, relevance through `x⁺W⁺ + x⁻W⁻`.
fn lin(x: &Mat, w: &Mat, r: &Mat) -> Mat {
    let (n, din, dout) = (x.len(), w.len(), w[0].len());
    let mut out = vec![vec![0.0; din]; n];
    for i in 0..n {
        for o in 0..dout {
            let mut z = 0.0;
            for j in 0..din {
                let (xv, wv) = (x[i][j], w[j][o]);
                if (xv > 0.0 && wv > 0.0) || (xv < 0.0 && wv < 0.0) {
                    z += xv * wv;
                }
            }
            let s = sdiv(r[i][o], z);
            for j in 0..din {
                let (xv, wv) = (x[i][j], w[j][o]);
                if (xv > 0.0 && wv > 0.0) || (xv < 0.0 && wv < 0.0) {
                    out[i][j] += xv * wv * s;
                }
            }
        }
    }
    out
}

/// `z = a·b`; returns the relevance of each factor before halving.
fn bilinear(a: &Mat, b: &Mat, r: &Mat) -> (Mat, Mat) {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut ra = vec![vec![0.0; k]; n];
    let mut rb = vec![vec![0.0; m]; k];
    for i in 0..n {
        for j in 0..m {
            let z: f64 = (0..k).map(|p| a[i][p] * b[p][j]).sum();
            let s = sdiv(r[i][j], z);
            for p in 0..k {
                ra[i][p] += a[i][p] * b[p][j] * s;
                rb[p][j] += a[i][p] * b[p][j] * s;
            }
        }
    }
    (ra, rb)
}

fn total(m: &Mat) -> f64 {
    m.iter().flatten().sum()
}

fn residual(a: &Mat, b: &Mat, r: &Mat) -> (Mat, Mat) {
    let mut ra = a.clone();
    let mut rb = b.clone();
    for i in 0..a.len() {
        for j in 0..a[0].len() {
            let s = sdiv(r[i][j], a[i][j] + b[i][j]);
            ra[i][j] = a[i][j] * s;
            rb[i][j] = b[i][j] * s;
        }
    }
    let (sa, sb, sr) = (total(&ra), total(&rb), total(r));
    let ta = sdiv(sa.abs(), sa.abs() + sb.abs()) * sr;
    let tb = sdiv(sb.abs(), sa.abs() + sb.abs()) * sr;
    let (ka, kb) = (sdiv(ta, sa), sdiv(tb, sb));
    ra.iter_mut().flatten().for_each(|v| *v *= ka);
    rb.iter_mut().flatten().for_each(|v| *v *= kb);
    (ra, rb)
}

fn plus(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Relevance on each head's attention matrix of a one-block model.
pub fn attention_relevance(model: &ViTModel, image: &Tensor, class: usize) -> Vec<Mat> {
    let acts = reference_forward(model, image);
    let cfg = &model.config;
    let (d, n) = (cfg.embed_dim, acts.features.len());
    let dh = d / cfg.num_heads;

    let mut onehot = vec![vec![0.0; cfg.num_classes]];
    onehot[0][class] = 1.0;
    let cls = lin(&acts.features[..1].to_vec(), &to_mat(&model.head_weight), &onehot);
    let mut r = vec![vec![0.0; d]; n];
    r[0] = cls[0].clone();

    let b = &acts.blocks[0];
    let bp = &model.blocks[0];
    let (r_resid, r_mlp) = residual(&b.resid, &b.fc2, &r);
    let r_act = lin(&b.act, &to_mat(&bp.fc2_weight), &r_mlp);
    let r_ln2 = lin(&b.ln2, &to_mat(&bp.fc1_weight), &r_act);
    let r = plus(&r_resid, &r_ln2);
    let (_, r_attn) = residual(&b.input, &b.proj, &r);
    let r_concat = lin(&b.concat, &to_mat(&bp.proj_weight), &r_attn);
    (0..cfg.num_heads)
        .map(|h| {
            let r_out: Mat = r_concat.iter().map(|row| row[h * dh..(h + 1) * dh].to_vec()).collect();
            let (r_m, _) = bilinear(&b.heads[h].attn, &b.heads[h].v, &r_out);
            r_m.into_iter().map(|row| row.into_iter().map(|v| v / 2.0).collect()).collect()
        })
        .collect()
}

