use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the scalar value and its analytic gradient at a point. The
/// result is the largest `|analytic - numeric| / max(1, |analytic|)` over
/// all coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value} at the base point")));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            lhs: analytic.shape().to_vec(),
            rhs: point.shape().to_vec(),
        });
    }
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + step;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = x - step;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = x;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
