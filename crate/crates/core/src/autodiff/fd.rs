use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for each entry.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    finite_diff_gradient_scaled(f, x, |_| h)
}

/// Central differences with a per-coordinate step `step(x_i)`, e.g.
/// `|xi| h * xi.abs().max(1.0)` for relative stepping.
pub fn finite_diff_gradient_scaled<F, S>(f: F, x: &Tensor, step: S) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
    S: Fn(f64) -> f64,
{
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = x.data()[i];
        let h = step(xi);
        if !(h > 0.0) {
            return Err(Error::Numeric(format!("finite-difference step must be positive, got {h}")));
        }
        probe.data_mut()[i] = xi + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = xi - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = xi;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value at coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}
