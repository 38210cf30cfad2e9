//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order. [`Graph::backward`] walks it once in reverse.

use super::kernels::{gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// A single-threaded compute graph. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

pub type ComputeGraph = Graph;

/// `(outer, len, inner)` strides for iterating one axis of a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![0.0; n.value.numel()])
            .as_mut_slice(),
    )
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf: its gradient is kept after backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].retain = true;
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Marks an intermediate result so that backward keeps its gradient, and
    /// makes everything computed from it differentiable. Must be called before
    /// `v` is used by any other op.
    pub fn watch(&mut self, v: Var) -> Result<()> {
        if v.0 + 1 != self.nodes.len() {
            return Err(Error::Usage(
                "watch() must be called on the most recently created node".into(),
            ));
        }
        let node = &mut self.nodes[v.0];
        node.requires_grad = true;
        node.retain = true;
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward's loss w.r.t. `v`, if `v` is a param or watched.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds the rank-1 `row` to every slice along the last dimension of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = *av.shape().last().unwrap_or(&1);
        if rv.rank() != 1 || rv.numel() != c || av.rank() == 0 {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_exact_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + erf(x * INV_SQRT_2)));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("softmax", xv.shape(), &[axis]));
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each slice along the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *xv.shape().last().unwrap_or(&0);
        if xv.rank() == 0 || gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("mean", xv.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[(o * len + l) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Mean { x, axis }, rg))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start >= end || end > xv.shape()[axis] {
            return Err(Error::shape("slice", xv.shape(), &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + w * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = w;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    /// Mean sigmoid cross-entropy over all logits, in the stable
    /// `max(x,0) - x*y + ln(1 + exp(-|x|))` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(Error::shape("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Usage("multi-label targets must be 0 or 1".into()));
        }
        let n = targets.len() as f64;
        let loss = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Fills gradients of the scalar `loss` for every param and watched node.
    /// Previous gradients are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.retain && node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                Some(_) | None => None,
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nt(m, n, k, g, bv.data(), ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn(k, m, n, av.data(), g, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                let c = nodes[row.0].value.numel();
                if let Some(gr) = slot(nodes, grads, *row) {
                    for chunk in g.chunks_exact(c) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
                }
            }
            Op::Gelu(a) => {
                let xs = nodes[a.0].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for j in 0..g.len() {
                        let x = xs[j];
                        let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                        ga[j] += g[j] * (cdf + x * pdf);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = nodes[gamma.0].value.data();
                let c = gam.len();
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for gr in g.chunks_exact(c) {
                        gb.iter_mut().zip(gr).for_each(|(o, x)| *o += x);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for j in 0..c {
                            let gh = gr[j] * gam[j];
                            mean_gh += gh;
                            mean_ghh += gh * hr[j];
                        }
                        mean_gh /= c as f64;
                        mean_ghh /= c as f64;
                        for j in 0..c {
                            let gh = gr[j] * gam[j];
                            gx[r * c + j] += s * (gh - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                }
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                if let Some(gx) = slot(nodes, grads, *x) {
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let w = node.value.shape()[*axis];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let base = (o * len + start) * inner;
                        gx[base..base + w * inner]
                            .iter_mut()
                            .zip(&g[o * w * inner..(o + 1) * w * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let xs = nodes[logits.0].value.data();
                let n = targets.len() as f64;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for j in 0..xs.len() {
                        let sig = 1.0 / (1.0 + (-xs[j]).exp());
                        gl[j] += g[0] * (sig - targets[j]) / n;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let out = g.matmul(a, i).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
        let out = g.matmul(i, a).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_basic_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[1.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(y).data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[3.7, 3.7 + 1.3]));
        let b = g.constant(t(&[2], &[0.0, 1.3]));
        let ya = g.softmax(a, 0).unwrap();
        let yb = g.softmax(b, 0).unwrap();
        for (p, q) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0.1, 5.0, -2.0, 1.0, 0.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        for j in 0..3 {
            assert!((v.at2(0, j) + v.at2(1, j) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4], 3.0));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, -4.0, 2.0, 0.5, 9.0, 1.0]));
        let gamma = g.constant(Tensor::zeros(&[3]));
        let beta = g.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn layer_norm_rejects_mismatched_affine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(Tensor::zeros(&[3]));
        assert!(g.layer_norm(x, gamma, beta, 1e-6).is_err());
    }

    #[test]
    fn gelu_zero_and_mean_of_constant() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.gelu(x);
        assert_eq!(g.value(y).item(), 0.0);

        let c = g.constant(Tensor::full(&[3, 4], 2.5));
        for axis in 0..2 {
            let m = g.mean(c, axis).unwrap();
            assert!(g.value(m).data().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn transpose_twice_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.transpose(x).unwrap();
        let z = g.transpose(y).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut g = Graph::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let x = g.param(t(&[4], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn backward_resets_between_calls() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().clone();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn watched_intermediate_receives_grad_and_constants_do_not() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.scale(a, 3.0);
        g.watch(b).unwrap();
        let c = g.mul(b, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[6.0, 12.0]);
        assert!(g.grad(a).is_none());
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn watch_after_use_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let _ = g.scale(a, 2.0);
        assert!(g.watch(a).is_err());
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 2]));
        assert!(g.bce_with_logits(x, &[0.5, 1.0]).is_err());
    }
}
