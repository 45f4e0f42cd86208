use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Base step for [`finite_diff_gradient`]; coordinate `i` uses `h * (1 + |x_i|)`.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function.
///
/// Coordinates are evaluated independently (in parallel with the `parallel`
/// feature), so `f` must be deterministic and thread-safe.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64> + Sync + Send,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite difference step must be > 0, got {h}")));
    }
    let grads: Vec<Result<f64>> = par::map(x.numel(), |i| {
        let xi = x.data()[i];
        let step = h * (1.0 + xi.abs());
        let mut probe = x.data().to_vec();
        probe[i] = xi + step;
        let plus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = xi - step;
        let minus = f(&Tensor::from_parts(x.shape().to_vec(), probe))?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_gradient".into() });
        }
        Ok((plus - minus) / (2.0 * step))
    });
    let data = grads.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-12)`: the error measure used by every
/// gradient check in this crate.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
