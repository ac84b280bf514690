//! Central finite differences, used as an independent oracle for [`Graph::backward`].
//!
//! [`Graph::backward`]: crate::Graph::backward

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Gradient of `f` at `x` by central differences: `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
pub fn finite_difference<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(NumError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let base = x.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumError::NonFinite {
                op: "finite_difference",
            });
        }
        out.push((fp - fm) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}
