//! Training losses on probability maps: clamped binary cross-entropy, a
//! smoothed overlap (Dice) term, and their weighted sum.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[CLAMP, 1-CLAMP]` before the logarithms.
pub const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// weight of the overlap term (default 1: both terms count equally)
    pub lambda: f64,
    /// overlap stabilizer; keeps empty-vs-empty at loss zero
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig { lambda: 1.0, epsilon: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be finite and > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of `target` under `pred`, both
/// elementwise in `[0,1]`.
pub fn bce<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("bce", pred, target)?;
    let n = pred.len() as f64;
    let p = pred.clamp(CLAMP, 1.0 - CLAMP);
    let pos = target.mul(&p.ln())?;
    let neg = target.affine(-1.0, 1.0).mul(&p.affine(-1.0, 1.0).ln())?;
    Ok(pos.add(&neg)?.sum_all().affine(-1.0 / n, 0.0))
}

/// `1 - (2*overlap + eps) / (sum_pred + sum_target + eps)`; zero for a
/// perfect binary match and for the empty-vs-empty pair.
pub fn dice<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    check_pair("dice", pred, target)?;
    let inter = pred.mul(target)?.sum_all();
    let num = inter.affine(2.0, eps);
    let den = pred.sum_all().add(&target.sum_all())?.affine(1.0, eps);
    Ok(num.div(&den)?.affine(-1.0, 1.0))
}

/// The three loss values of one prediction; `total = bce + lambda*dice`.
pub struct LossTerms<T: Scalar> {
    pub total: Tensor<T>,
    pub bce: Tensor<T>,
    pub dice: Tensor<T>,
}

/// With `lambda == 0` the total *is* the cross-entropy node — bit-for-bit,
/// not merely numerically close.
pub fn loss_terms<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossTerms<T>> {
    cfg.validate()?;
    let b = bce(pred, target)?;
    let d = dice(pred, target, cfg.epsilon)?;
    let total = if cfg.lambda == 0.0 {
        b.clone()
    } else {
        b.add(&d.affine(cfg.lambda, 0.0))?
    };
    Ok(LossTerms { total, bce: b, dice: d })
}
