use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences on every coordinate of `x`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, eps, &coords)
}

/// Like [`grad_check`] but only probes the listed coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let xv = g.input(x.clone().with_grad());
        let out = f(&mut g, xv)?;
        let grads = g.backward(out)?;
        grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut g, xv)?;
        if g.value(out).len() != 1 {
            return Err(Error::shape("grad_check", "function must return a scalar"));
        }
        Ok(g.scalar_value(out))
    };
    let mut worst = 0.0f64;
    for &c in coords {
        let mut plus = x.data().to_vec();
        plus[c] += eps;
        let mut minus = x.data().to_vec();
        minus[c] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[c];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient at coordinate {c}: analytic {a}, numeric {numeric}")));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
