//! Diffusion baseline on the same decoder: cosine noise schedule, closed-form
//! forward corruption, and deterministic DDIM sampling with optional box renewal.
//!
//! The decoder keeps its velocity parametrization; the clean-box estimate is
//! `x_in + (1 − t)·v` with `t` derived from the diffusion step, exactly as the
//! flow objective extrapolates to data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowDetError, Result};
use crate::geometry::FlowVector;
use crate::model::{FeatureMap, FOREGROUND};
use crate::sampler::{DetectionSet, Prior, VelocityField};
use crate::scalar::Scalar;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    /// Flow-space coordinates are multiplied by this before corruption.
    pub signal_scale: f64,
    /// Proposals whose foreground probability falls below this are redrawn
    /// between steps when renewal is enabled.
    pub renewal_threshold: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            signal_scale: 2.0,
            renewal_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `ᾱ(t) ∝ cos²(((t/T) + s)/(1 + s)·π/2)` with clipped betas.
    pub fn cosine(timesteps: usize) -> Self {
        let t = timesteps as f64;
        let f = |i: f64| {
            (((i / t) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let mut acc = 1.0;
        let alphas_cumprod = (0..timesteps)
            .map(|i| {
                let beta = (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(0.0, MAX_BETA);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self {
            timesteps,
            alphas_cumprod,
        }
    }

    pub fn alpha_bar(&self, step: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(step)
            .copied()
            .ok_or_else(|| FlowDetError::Range(format!("diffusion step {step} outside [0, {})", self.timesteps)))
    }

    /// `√ᾱ·x1 + √(1 − ᾱ)·noise`.
    pub fn q_sample<T: Scalar>(
        &self,
        x1: &[FlowVector<T>],
        step: usize,
        noise: &[FlowVector<T>],
    ) -> Result<Vec<FlowVector<T>>> {
        if x1.len() != noise.len() {
            return Err(FlowDetError::Dimension(format!(
                "{} boxes but {} noise vectors",
                x1.len(),
                noise.len()
            )));
        }
        let ab = self.alpha_bar(step)?;
        let (s, n) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        Ok(x1.iter().zip(noise).map(|(x, e)| x.scale(s).add(e.scale(n))).collect())
    }

    /// Decoder time for a diffusion step: near 1 for clean, 0 for pure noise.
    pub fn model_time<T: Scalar>(&self, step: usize) -> T {
        let t = self.timesteps as f64;
        T::lit((t - 1.0 - step.min(self.timesteps - 1) as f64) / t)
    }

    /// Descending step pairs `(s, s_next)` of an `S`-point subschedule; the
    /// last pair ends at `-1` (fully denoised).
    pub fn ddim_pairs(&self, steps: usize) -> Vec<(usize, Option<usize>)> {
        let t = self.timesteps as f64;
        let times: Vec<i64> = (0..=steps)
            .map(|i| (-1.0 + i as f64 * t / steps as f64).trunc() as i64)
            .rev()
            .collect();
        times
            .windows(2)
            .map(|w| (w[0].max(0) as usize, if w[1] < 0 { None } else { Some(w[1] as usize) }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdimConfig {
    pub n_proposals: usize,
    pub steps: usize,
    pub noise_seed: u64,
    pub box_renewal: bool,
    pub diffusion: DiffusionConfig,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self {
            n_proposals: 120,
            steps: 3,
            noise_seed: 0,
            box_renewal: false,
            diffusion: DiffusionConfig::default(),
        }
    }
}

/// Deterministic DDIM (η = 0) from Gaussian noise to boxes.
pub fn ddim_sample<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    features: &FeatureMap<T>,
    cfg: &DdimConfig,
) -> Result<DetectionSet<T>> {
    if cfg.n_proposals == 0 || cfg.steps == 0 || cfg.steps > cfg.diffusion.timesteps {
        return Err(FlowDetError::Range(format!(
            "need 1 <= steps <= {} and at least one proposal",
            cfg.diffusion.timesteps
        )));
    }
    let sched = NoiseSchedule::cosine(cfg.diffusion.timesteps);
    let scale = T::lit(cfg.diffusion.signal_scale);
    let inv_scale = T::one() / scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let mut x: Vec<FlowVector<T>> = Prior::StandardNormal.draw(cfg.n_proposals, &mut rng);
    let pairs = sched.ddim_pairs(cfg.steps);

    for (k, &(s, next)) in pairs.iter().enumerate() {
        let x_in: Vec<_> = x.iter().map(|b| b.scale(inv_scale)).collect();
        let t = sched.model_time::<T>(s);
        let out = model.velocity(&x_in, features, t)?;
        if let Some(i) = out.velocities.iter().position(|v| !v.is_finite()) {
            return Err(FlowDetError::Divergence {
                step: k,
                detail: format!("prediction for proposal {i} is not finite"),
            });
        }
        let x1_hat: Vec<FlowVector<T>> = x_in
            .iter()
            .zip(&out.velocities)
            .map(|(b, v)| b.add(v.scale(T::one() - t)))
            .collect();
        let Some(next) = next else {
            return DetectionSet::from_states(x1_hat, &out);
        };
        let ab = T::lit(sched.alpha_bar(s)?);
        let ab_next = T::lit(sched.alpha_bar(next)?);
        x = x
            .iter()
            .zip(&x1_hat)
            .map(|(xs, x1)| {
                let x1s = x1.scale(scale);
                let eps = xs.sub(x1s.scale(ab.sqrt())).scale(T::one() / (T::one() - ab).sqrt());
                x1s.scale(ab_next.sqrt()).add(eps.scale((T::one() - ab_next).sqrt()))
            })
            .collect();
        if cfg.box_renewal {
            let thr = T::lit(cfg.diffusion.renewal_threshold);
            for (i, b) in x.iter_mut().enumerate() {
                if out.prob(i, FOREGROUND) < thr {
                    *b = Prior::StandardNormal.draw_one(&mut rng);
                }
            }
        }
    }
    unreachable!("subschedule always ends at the clean step")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use crate::model::DecoderOutput;
    use crate::tensor::Tensor;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_is_monotone() {
        for t in [100, 1000] {
            let s = NoiseSchedule::cosine(t);
            assert!(s.alphas_cumprod[0] > 0.99 && s.alphas_cumprod[0] <= 1.0);
            assert!(s.alphas_cumprod.windows(2).all(|w| w[1] < w[0]));
            assert!(s.alphas_cumprod.iter().all(|&a| a > 0.0 && a <= 1.0));
        }
    }

    #[test]
    fn q_sample_limits_and_variance() {
        let s = NoiseSchedule::cosine(1000);
        let x1 = vec![FlowVector::new(0.3f64, -0.2, -1.0, -2.0)];
        let noise = vec![FlowVector::new(1.0, 1.0, 1.0, 1.0)];
        let clean = s.q_sample(&x1, 0, &noise).unwrap();
        assert!(clean[0].max_abs_diff(&x1[0]) < 0.1);
        let noisy = s.q_sample(&x1, 999, &noise).unwrap();
        assert!(noisy[0].max_abs_diff(&noise[0]) < 0.05);
        assert!(s.q_sample(&x1, 1000, &noise).is_err());

        let step = 400;
        let ab = s.alphas_cumprod[step];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                s.q_sample(&x1, step, &[FlowVector::new(e, 0.0, 0.0, 0.0)]).unwrap()[0].a
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
    }

    #[test]
    fn subschedule_endpoints() {
        let s = NoiseSchedule::cosine(1000);
        let p = s.ddim_pairs(1);
        assert_eq!(p, vec![(999, None)]);
        let p = s.ddim_pairs(4);
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].0, 999);
        assert_eq!(p.last().unwrap().1, None);
        let full = s.ddim_pairs(1000);
        assert_eq!(full.len(), 1000);
        assert!(full.iter().all(|(a, b)| b.map_or(*a == 0, |b| b + 1 == *a)));
    }

    struct Oracle {
        x1: Vec<FlowVector<f64>>,
    }

    impl VelocityField<f64> for Oracle {
        fn encode(&self, _: &Image<f64>) -> Result<FeatureMap<f64>> {
            unreachable!()
        }

        fn velocity(&self, boxes: &[FlowVector<f64>], _: &FeatureMap<f64>, t: f64) -> Result<DecoderOutput<f64>> {
            Ok(DecoderOutput {
                velocities: boxes
                    .iter()
                    .zip(&self.x1)
                    .map(|(b, x)| x.sub(*b).scale(1.0 / (1.0 - t)))
                    .collect(),
                class_logits: vec![0.0; 2 * boxes.len()],
                num_classes: 2,
            })
        }
    }

    #[test]
    fn oracle_recovers_targets() {
        let x1: Vec<_> = (0..4)
            .map(|i| FlowVector::new(0.2 * i as f64, -0.1, -1.5, -1.0))
            .collect();
        let oracle = Oracle { x1: x1.clone() };
        let fm = FeatureMap {
            channels: 1,
            height: 1,
            width: 1,
            stride: 1,
            data: Tensor::zeros(&[1, 1, 1]),
        };
        for (steps, renewal) in [(1000, false), (3, false), (3, true)] {
            let cfg = DdimConfig {
                n_proposals: 4,
                steps,
                box_renewal: renewal,
                ..DdimConfig::default()
            };
            let out = ddim_sample(&oracle, &fm, &cfg).unwrap();
            for (a, b) in out.states.iter().zip(&x1) {
                assert!(a.max_abs_diff(b) < 1e-4);
            }
            assert_eq!(out, ddim_sample(&oracle, &fm, &cfg).unwrap());
        }
    }
}
