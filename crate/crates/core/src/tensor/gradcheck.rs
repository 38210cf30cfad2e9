use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const REL_FLOOR: f64 = 1e-6;

/// Compares the graph gradient of the scalar `f(x)` against central
/// differences with step `eps`.
///
/// Returns `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-6)` for analytic `a`
/// and numeric `n`; the floor keeps vanishing gradients from dominating.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .ok_or_else(|| Error::Usage("function output does not depend on its input".into()))?
        .clone();

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
