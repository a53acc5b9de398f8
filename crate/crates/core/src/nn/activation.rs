//! Scalar nonlinearities shared by the network layers and the hash head.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Logistic function with slope `beta`: `1 / (1 + exp(-beta * c))`.
///
/// Evaluated in the branch that never exponentiates a positive argument, so
/// it saturates to 0 or 1 instead of overflowing.
#[inline]
pub fn sigmoid_beta<T: Real>(c: T, beta: T) -> T {
    let x = beta * c;
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Derivative of [`sigmoid_beta`] with respect to `c`, given its output `s`.
#[inline]
pub fn sigmoid_beta_grad<T: Real>(s: T, beta: T) -> T {
    beta * s * (T::one() - s)
}

/// Three-region threshold: 0 below `0.5 - eps`, 1 above `0.5 + eps`,
/// identity in between (both bounds inclusive).
pub fn piecewise_threshold<T: Real>(s: T, eps: T) -> Result<T> {
    check_epsilon(eps)?;
    if !(s >= T::zero() && s <= T::one()) {
        return Err(Error::Domain(format!(
            "threshold input must lie in [0, 1], got {s:?}"
        )));
    }
    Ok(threshold_unchecked(s, eps))
}

pub(crate) fn check_epsilon<T: Real>(eps: T) -> Result<()> {
    if eps > T::zero() && eps <= T::of(0.5) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "epsilon must lie in (0, 0.5], got {eps:?}"
        )))
    }
}

#[inline]
pub(crate) fn threshold_unchecked<T: Real>(s: T, eps: T) -> T {
    let half = T::of(0.5);
    if s < half - eps {
        T::zero()
    } else if s > half + eps {
        T::one()
    } else {
        s
    }
}

/// Straight subgradient of the threshold: 1 on the closed linear region,
/// 0 where the output is saturated.
#[inline]
pub fn piecewise_threshold_grad<T: Real>(s: T, eps: T) -> T {
    let half = T::of(0.5);
    if s >= half - eps && s <= half + eps {
        T::one()
    } else {
        T::zero()
    }
}
