//! Finite-difference verification of reverse-mode gradients.

use super::{no_grad, sc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Elementwise relative error `max_i |a_i - n_i| / max(1, |a_i|, |n_i|)`.
/// The unit floor in the denominator keeps tiny gradients from inflating
/// the ratio. Empty slices compare equal.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "rel_err length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of the scalar `f(x)` with respect to every
/// element of `x`, evaluated with the tape disabled.
pub fn numeric_grad<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let base = x.data().to_vec();
    let shape = x.shape().to_vec();
    let eval = |data: Vec<T>| -> Result<f64> {
        let t = Tensor::from_vec(data, &shape)?;
        let y = no_grad(|| f(&t))?;
        if y.len() != 1 {
            return Err(Error::Invalid {
                op: "numeric_grad",
                msg: format!("objective must be scalar, got {:?}", y.shape()),
            });
        }
        Ok(y.item().into_f64())
    };
    let h = sc::<T>(eps);
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compares the reverse-mode gradient of the scalar `f(x)` against central
/// differences and returns the worst relative error. The check runs on a
/// fresh gradient-requiring copy of `x`, so callers never need to clear
/// accumulated gradients first.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let leaf = Tensor::parameter(x.data().to_vec(), x.shape())?;
    let y = f(&leaf)?;
    if y.len() != 1 {
        return Err(Error::Invalid {
            op: "grad_check",
            msg: format!("objective must be scalar, got {:?}", y.shape()),
        });
    }
    if !y.all_finite() {
        return Err(Error::Numeric { module: "grad_check".into(), msg: "non-finite objective".into() });
    }
    y.backward()?;
    let analytic: Vec<f64> = match leaf.grad() {
        Some(g) => g.iter().map(|v| v.into_f64()).collect(),
        None => vec![0.0; leaf.len()],
    };
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { module: "grad_check".into(), msg: "non-finite gradient".into() });
    }
    let numeric = numeric_grad(&f, x, eps)?;
    Ok(rel_err(&analytic, &numeric))
}
