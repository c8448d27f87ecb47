//! Finite-difference verification of the reverse pass.

use crate::error::{Error, Result};
use ndarray::Array2;

use super::graph::{Graph, Var};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// `f` must be deterministic (no dropout) and return a scalar node. Returns
/// the max elementwise relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Array2<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |point: &Array2<f64>| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let v = g.leaf(point.clone(), false);
        let out = f(&mut g, v)?;
        let y = g.scalar(out)?;
        if !y.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite function value".into()));
        }
        Ok(y)
    };

    let mut g: Graph<f64> = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    g.scalar(out)?;
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .cloned()
        .ok_or_else(|| Error::Numeric("grad_check: no gradient reached the input".into()))?;
    if analytic.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("grad_check: non-finite analytic gradient".into()));
    }

    let mut worst = 0.0f64;
    let mut point = x.clone();
    for idx in 0..x.len() {
        let (m, _n) = x.dim();
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        debug_assert!(i < m);
        let orig = point[[i, j]];
        point[[i, j]] = orig + eps;
        let plus = eval(&point)?;
        point[[i, j]] = orig - eps;
        let minus = eval(&point)?;
        point[[i, j]] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[[i, j]];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
