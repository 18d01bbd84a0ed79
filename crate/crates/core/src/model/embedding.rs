use crate::autograd::{Graph, Var};
use crate::error::{FlowDetError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Time is multiplied by this before the sinusoids; keeps the highest
/// frequency gentle enough that the embedding moves by < 1e-3 per 1e-6 of t.
pub const TIME_SCALE: f64 = 100.0;

const MAX_PERIOD: f64 = 1000.0;

/// Output of the learned time projection: per-channel `(scale, shift)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding<T>(pub Vec<T>);

impl<T: Scalar> TimeEmbedding<T> {
    pub fn distance(&self, other: &Self) -> T {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<T>()
            .sqrt()
    }
}

/// `[sin(ω_i·s·t), cos(ω_i·s·t)]` with geometric frequencies `ω_i`.
pub fn sinusoidal_features<T: Scalar>(t: T, frequencies: usize) -> Result<Vec<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(FlowDetError::Range(format!("time {t} outside [0,1]")));
    }
    let arg = t * T::lit(TIME_SCALE);
    let mut out = Vec::with_capacity(2 * frequencies);
    for i in 0..frequencies {
        let w = T::lit((-(MAX_PERIOD.ln()) * i as f64 / frequencies as f64).exp());
        out.push((arg * w).sin());
    }
    for i in 0..frequencies {
        let w = T::lit((-(MAX_PERIOD.ln()) * i as f64 / frequencies as f64).exp());
        out.push((arg * w).cos());
    }
    Ok(out)
}

/// Sinusoids → linear → SiLU → linear. `params` are `[w_in, b_in, w_out, b_out]`.
/// Returns the `[1, 2·hidden]` projection and the raw sinusoid node.
pub fn time_embedding<T: Scalar>(g: &mut Graph<T>, params: &[Var; 4], t: T, frequencies: usize) -> Result<(Var, Var)> {
    let feats = sinusoidal_features(t, frequencies)?;
    let raw = g.constant(Tensor::from_vec(&[1, 2 * frequencies], feats)?);
    let h = g.matmul(raw, params[0])?;
    let h = g.add_row(h, params[1])?;
    let h = g.silu(h);
    let h = g.matmul(h, params[2])?;
    let h = g.add_row(h, params[3])?;
    Ok((h, raw))
}
