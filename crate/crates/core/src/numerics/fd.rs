use crate::{Error, Real, Result, Tensor};

/// Central-difference step used throughout the gradient checks.
pub const DEFAULT_FD_STEP: Real = 1e-5;

/// Central-difference gradient `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` of a scalar
/// function, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: Real) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Real>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} during finite differencing"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `max|a − b| / max(max|a|, max|b|, 1e-6)`.
pub fn relative_error(a: &[Real], b: &[Real]) -> Real {
    assert_eq!(a.len(), b.len(), "relative_error on different lengths");
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0 as Real, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(1e-6 as Real, |m, v| m.max(v.abs()));
    diff / scale
}
