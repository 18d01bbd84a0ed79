//! Straight-line (rectified) probability path between prior noise and data.

use crate::error::{FlowDetError, Result};
use crate::geometry::FlowVector;
use crate::scalar::Scalar;

/// Velocity in flow space; same layout as [`FlowVector`].
pub type VelocityVector<T> = FlowVector<T>;

/// One draw from the path: both endpoints, a time, the state and its target velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample<T> {
    pub x0: Vec<FlowVector<T>>,
    pub x1: Vec<FlowVector<T>>,
    pub t: T,
    pub xt: Vec<FlowVector<T>>,
    pub ut: Vec<VelocityVector<T>>,
}

impl<T: Scalar> PathSample<T> {
    pub fn new(x0: Vec<FlowVector<T>>, x1: Vec<FlowVector<T>>, t: T) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        let ut = target_velocity(&x0, &x1)?;
        Ok(Self { x0, x1, t, xt, ut })
    }
}

fn check_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(FlowDetError::Dimension(format!("{what}: {a} vs {b} boxes")));
    }
    Ok(())
}

fn check_unit_time<T: Scalar>(t: T) -> Result<()> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(FlowDetError::Range(format!("time {t} outside [0,1]")));
    }
    Ok(())
}

/// `(1 − t)·x0 + t·x1`, exact at both endpoints.
pub fn interpolate<T: Scalar>(x0: &[FlowVector<T>], x1: &[FlowVector<T>], t: T) -> Result<Vec<FlowVector<T>>> {
    check_same_len("interpolate", x0.len(), x1.len())?;
    check_unit_time(t)?;
    // Endpoints are returned verbatim so t ∈ {0, 1} carries no rounding.
    if t == T::zero() {
        return Ok(x0.to_vec());
    }
    if t == T::one() {
        return Ok(x1.to_vec());
    }
    let s = T::one() - t;
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| a.zip(*b, |p, q| s * p + t * q))
        .collect())
}

/// `x1 − x0`, the time-independent velocity of the straight path.
pub fn target_velocity<T: Scalar>(x0: &[FlowVector<T>], x1: &[FlowVector<T>]) -> Result<Vec<VelocityVector<T>>> {
    check_same_len("target_velocity", x0.len(), x1.len())?;
    Ok(x0.iter().zip(x1).map(|(a, b)| b.sub(*a)).collect())
}

/// One-shot jump to the data end: `xt + (1 − t)·v`.
pub fn extrapolate_to_data<T: Scalar>(
    xt: &[FlowVector<T>],
    v: &[VelocityVector<T>],
    t: T,
) -> Result<Vec<FlowVector<T>>> {
    check_same_len("extrapolate_to_data", xt.len(), v.len())?;
    check_unit_time(t)?;
    let rem = T::one() - t;
    Ok(xt.iter().zip(v).map(|(x, d)| x.zip(*d, |p, q| p + rem * q)).collect())
}
