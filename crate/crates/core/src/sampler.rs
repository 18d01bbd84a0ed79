//! Few-step ODE inference: integrate the learned velocity field from prior
//! noise at `t = 0` to boxes at `t = 1`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{FlowDetError, Result};
use crate::flowpath::VelocityVector;
use crate::geometry::{decode_flow_space, Detection, FlowVector, MIN_BOX_SCALE};
use crate::model::{DecoderOutput, Detector, FeatureMap, FOREGROUND};
use crate::scalar::Scalar;

/// Uniform time grid on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSchedule<T> {
    pub steps: usize,
    pub knots: Vec<T>,
    pub dt: Vec<T>,
}

pub fn make_schedule<T: Scalar>(steps: usize) -> Result<TimeSchedule<T>> {
    if steps == 0 {
        return Err(FlowDetError::Range("step count must be at least 1".into()));
    }
    let s = T::from_usize_lossy(steps);
    let mut knots: Vec<T> = (0..steps).map(|i| T::from_usize_lossy(i) / s).collect();
    knots.push(T::one());
    let dt = knots.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(TimeSchedule { steps, knots, dt })
}

/// Distribution of initial proposals in flow space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Prior {
    #[default]
    StandardNormal,
    /// Centers uniform over the image, sizes `u ~ U(w_min, 1)` stored as `ln u`.
    UniformLog,
}

impl std::str::FromStr for Prior {
    type Err = FlowDetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard-normal" | "normal" => Ok(Prior::StandardNormal),
            "uniform-log" => Ok(Prior::UniformLog),
            other => Err(FlowDetError::Config(format!("unknown prior {other:?}"))),
        }
    }
}

impl Prior {
    pub fn draw<T: Scalar, R: Rng>(&self, n: usize, rng: &mut R) -> Vec<FlowVector<T>> {
        (0..n).map(|_| self.draw_one(rng)).collect()
    }

    pub fn draw_one<T: Scalar, R: Rng>(&self, rng: &mut R) -> FlowVector<T> {
        match self {
            Prior::StandardNormal => {
                let mut g = || {
                    let v: f64 = StandardNormal.sample(rng);
                    T::lit(v)
                };
                FlowVector::new(g(), g(), g(), g())
            }
            Prior::UniformLog => {
                let c = rng.gen_range(-1.0..=1.0);
                let d = rng.gen_range(-1.0..=1.0);
                let w: f64 = rng.gen_range(MIN_BOX_SCALE..=1.0);
                let h: f64 = rng.gen_range(MIN_BOX_SCALE..=1.0);
                FlowVector::new(T::lit(c), T::lit(d), T::lit(w.ln()), T::lit(h.ln()))
            }
        }
    }
}

/// ODE update rule. Only Euler matches the reference method; the others are
/// for comparison and cost more than one field evaluation per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Euler,
    Heun,
    Rk4,
}

impl std::str::FromStr for Solver {
    type Err = FlowDetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            "rk4" => Ok(Solver::Rk4),
            other => Err(FlowDetError::Config(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_proposals: usize,
    pub steps: usize,
    pub noise_seed: u64,
    pub prior: Prior,
    #[serde(default)]
    pub solver: Solver,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_proposals: 120,
            steps: 3,
            noise_seed: 0,
            prior: Prior::StandardNormal,
            solver: Solver::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_proposals == 0 || self.steps == 0 {
            return Err(FlowDetError::Range(
                "proposals and steps must both be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Same settings with a noise seed specific to one image of a dataset.
    pub fn for_image(&self, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        rng.set_stream(index as u64 + 1);
        Self {
            noise_seed: rng.gen(),
            ..self.clone()
        }
    }
}

/// Anything that can encode an image and evaluate velocities and class
/// logits for a batch of flow-space boxes at time `t`.
pub trait VelocityField<T: Scalar>: Sync {
    fn encode(&self, image: &Image<T>) -> Result<FeatureMap<T>>;

    fn velocity(&self, boxes: &[FlowVector<T>], features: &FeatureMap<T>, t: T) -> Result<DecoderOutput<T>>;
}

impl<T: Scalar> VelocityField<T> for Detector<T> {
    fn encode(&self, image: &Image<T>) -> Result<FeatureMap<T>> {
        self.encode_image(image)
    }

    fn velocity(&self, boxes: &[FlowVector<T>], features: &FeatureMap<T>, t: T) -> Result<DecoderOutput<T>> {
        self.decode(boxes, features, t)
    }
}

/// Wraps a field and counts encoder and decoder calls.
pub struct CountingField<'a, M> {
    inner: &'a M,
    encodes: AtomicUsize,
    decodes: AtomicUsize,
}

impl<'a, M> CountingField<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            encodes: AtomicUsize::new(0),
            decodes: AtomicUsize::new(0),
        }
    }

    pub fn encoder_calls(&self) -> usize {
        self.encodes.load(Ordering::SeqCst)
    }

    pub fn decoder_calls(&self) -> usize {
        self.decodes.load(Ordering::SeqCst)
    }
}

impl<T: Scalar, M: VelocityField<T>> VelocityField<T> for CountingField<'_, M> {
    fn encode(&self, image: &Image<T>) -> Result<FeatureMap<T>> {
        self.encodes.fetch_add(1, Ordering::SeqCst);
        self.inner.encode(image)
    }

    fn velocity(&self, boxes: &[FlowVector<T>], features: &FeatureMap<T>, t: T) -> Result<DecoderOutput<T>> {
        self.decodes.fetch_add(1, Ordering::SeqCst);
        self.inner.velocity(boxes, features, t)
    }
}

/// Final boxes of one sampling run, in proposal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de>"))]
pub struct DetectionSet<T> {
    pub detections: Vec<Detection<T>>,
    /// Flow-space end states the detections were decoded from.
    pub states: Vec<FlowVector<T>>,
}

impl<T: Scalar> DetectionSet<T> {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Decodes flow states and scores them with the foreground probability.
    pub fn from_states(states: Vec<FlowVector<T>>, out: &DecoderOutput<T>) -> Result<Self> {
        let detections = states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Detection {
                    bbox: decode_flow_space(s)?,
                    score: out.prob(i, FOREGROUND),
                    class_id: FOREGROUND,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { detections, states })
    }
}

/// `xt + dt·v`. Reports divergence when `v` is not finite.
pub fn euler_step<T: Scalar>(xt: &[FlowVector<T>], v: &[VelocityVector<T>], dt: T) -> Result<Vec<FlowVector<T>>> {
    if !(dt > T::zero()) {
        return Err(FlowDetError::Range(format!("step size {dt} must be positive")));
    }
    if xt.len() != v.len() {
        return Err(FlowDetError::Dimension(format!(
            "{} states but {} velocities",
            xt.len(),
            v.len()
        )));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(FlowDetError::Divergence {
            step: 0,
            detail: format!("velocity of proposal {i} is not finite"),
        });
    }
    Ok(xt.iter().zip(v).map(|(x, d)| x.add(d.scale(dt))).collect())
}

fn at_step(e: FlowDetError, step: usize) -> FlowDetError {
    match e {
        FlowDetError::Divergence { detail, .. } => FlowDetError::Divergence { step, detail },
        other => other,
    }
}

fn axpy<T: Scalar>(x: &[FlowVector<T>], v: &[FlowVector<T>], k: T) -> Vec<FlowVector<T>> {
    x.iter().zip(v).map(|(a, b)| a.add(b.scale(k))).collect()
}

/// Integrates from the prior to `t = 1` and returns the decoded boxes.
/// With Euler this costs exactly `steps` decoder calls; scores come from the last one.
pub fn sample<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    features: &FeatureMap<T>,
    cfg: &SamplerConfig,
) -> Result<DetectionSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let x0 = cfg.prior.draw(cfg.n_proposals, &mut rng);
    integrate(model, features, x0, cfg.steps, cfg.solver)
}

/// Runs the ODE from given initial states.
pub fn integrate<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    features: &FeatureMap<T>,
    x0: Vec<FlowVector<T>>,
    steps: usize,
    solver: Solver,
) -> Result<DetectionSet<T>> {
    let sched = make_schedule::<T>(steps)?;
    let mut x = x0;
    let mut last: Option<DecoderOutput<T>> = None;
    let half = T::lit(0.5);
    for (k, (&t, &dt)) in sched.knots.iter().zip(&sched.dt).enumerate() {
        let eval = |x: &[FlowVector<T>], t: T| -> Result<DecoderOutput<T>> {
            let out = model.velocity(x, features, t).map_err(|e| at_step(e, k))?;
            if out.velocities.len() != x.len() {
                return Err(FlowDetError::Dimension(format!(
                    "field returned {} velocities for {} boxes",
                    out.velocities.len(),
                    x.len()
                )));
            }
            if let Some(i) = out.velocities.iter().position(|v| !v.is_finite()) {
                return Err(FlowDetError::Divergence {
                    step: k,
                    detail: format!("velocity of proposal {i} is not finite"),
                });
            }
            Ok(out)
        };
        let k1 = eval(&x, t)?;
        x = match solver {
            Solver::Euler => euler_step(&x, &k1.velocities, dt).map_err(|e| at_step(e, k))?,
            Solver::Heun => {
                let pred = axpy(&x, &k1.velocities, dt);
                let k2 = eval(&pred, t + dt)?;
                let avg: Vec<_> = k1
                    .velocities
                    .iter()
                    .zip(&k2.velocities)
                    .map(|(a, b)| a.add(*b).scale(half))
                    .collect();
                euler_step(&x, &avg, dt).map_err(|e| at_step(e, k))?
            }
            Solver::Rk4 => {
                let h = dt * half;
                let k2 = eval(&axpy(&x, &k1.velocities, h), t + h)?;
                let k3 = eval(&axpy(&x, &k2.velocities, h), t + h)?;
                let k4 = eval(&axpy(&x, &k3.velocities, dt), t + dt)?;
                let two = T::lit(2.0);
                let sixth = T::one() / T::lit(6.0);
                let combo: Vec<_> = (0..x.len())
                    .map(|i| {
                        k1.velocities[i]
                            .add(k2.velocities[i].scale(two))
                            .add(k3.velocities[i].scale(two))
                            .add(k4.velocities[i])
                            .scale(sixth)
                    })
                    .collect();
                euler_step(&x, &combo, dt).map_err(|e| at_step(e, k))?
            }
        };
        last = Some(k1);
    }
    let last = last.expect("at least one step");
    DetectionSet::from_states(x, &last)
}

/// One [`sample`] per step count, all from the same initial noise.
pub fn step_sweep<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    features: &FeatureMap<T>,
    steps: &[usize],
    cfg: &SamplerConfig,
) -> Result<BTreeMap<usize, DetectionSet<T>>> {
    if steps.is_empty() {
        return Err(FlowDetError::Range("empty step list".into()));
    }
    steps
        .iter()
        .map(|&s| {
            let c = SamplerConfig {
                steps: s,
                ..cfg.clone()
            };
            Ok((s, sample(model, features, &c)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Returns the straight-line velocity towards a fixed target from the
    /// initial state it was built with.
    struct ConstantField {
        v: Vec<FlowVector<f64>>,
    }

    impl VelocityField<f64> for ConstantField {
        fn encode(&self, _: &Image<f64>) -> Result<FeatureMap<f64>> {
            unreachable!()
        }

        fn velocity(&self, boxes: &[FlowVector<f64>], _: &FeatureMap<f64>, _: f64) -> Result<DecoderOutput<f64>> {
            Ok(DecoderOutput {
                velocities: self.v.clone(),
                class_logits: vec![0.0; 2 * boxes.len()],
                num_classes: 2,
            })
        }
    }

    fn features() -> FeatureMap<f64> {
        FeatureMap {
            channels: 1,
            height: 1,
            width: 1,
            stride: 1,
            data: Tensor::zeros(&[1, 1, 1]),
        }
    }

    #[test]
    fn schedules() {
        let s = make_schedule::<f64>(1).unwrap();
        assert_eq!(s.knots, vec![0.0, 1.0]);
        assert_eq!(s.dt, vec![1.0]);
        let s = make_schedule::<f64>(3).unwrap();
        assert_eq!(s.knots.len(), 4);
        assert!((s.knots[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(s.dt.iter().all(|&d| (d - 1.0 / 3.0).abs() < 1e-15));
        let s = make_schedule::<f64>(4).unwrap();
        assert_eq!(s.dt.iter().sum::<f64>(), 1.0);
        assert!(make_schedule::<f64>(0).is_err());
    }

    #[test]
    fn euler_cases() {
        let x = vec![FlowVector::new(0.1, -0.3, -1.0, -2.0)];
        assert_eq!(euler_step(&x, &[FlowVector::zero()], 0.3).unwrap(), x);
        let target = FlowVector::new(0.5, 0.5, -0.7, -0.9);
        let v = vec![target.sub(x[0])];
        let y = euler_step(&x, &v, 1.0).unwrap();
        assert!(y[0].max_abs_diff(&target) < 1e-15);
        let half = euler_step(&euler_step(&x, &v, 0.5).unwrap(), &v, 0.5).unwrap();
        assert!(half[0].max_abs_diff(&y[0]) < 1e-15);
        let bad = vec![FlowVector::new(f64::NAN, 0.0, 0.0, 0.0)];
        assert!(matches!(
            euler_step(&x, &bad, 0.5),
            Err(FlowDetError::Divergence { .. })
        ));
        assert!(euler_step(&x, &v, 0.0).is_err());
    }

    #[test]
    fn constant_field_is_step_independent() {
        let cfg = SamplerConfig {
            n_proposals: 5,
            steps: 1,
            noise_seed: 11,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        let x0: Vec<FlowVector<f64>> = cfg.prior.draw(5, &mut rng);
        let x1: Vec<FlowVector<f64>> = (0..5)
            .map(|i| FlowVector::new(0.1 * i as f64 - 0.2, 0.3, -1.5, -1.2))
            .collect();
        let field = ConstantField {
            v: x0.iter().zip(&x1).map(|(a, b)| b.sub(*a)).collect(),
        };
        for s in [1, 2, 3, 10] {
            for solver in [Solver::Euler, Solver::Heun, Solver::Rk4] {
                let c = SamplerConfig {
                    steps: s,
                    solver,
                    ..cfg.clone()
                };
                let out = sample(&field, &features(), &c).unwrap();
                for (a, b) in out.states.iter().zip(&x1) {
                    assert!(a.max_abs_diff(b) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn euler_cost_is_one_call_per_step() {
        let field = ConstantField {
            v: vec![FlowVector::zero(); 3],
        };
        let counted = CountingField::new(&field);
        let cfg = SamplerConfig {
            n_proposals: 3,
            steps: 4,
            ..SamplerConfig::default()
        };
        sample(&counted, &features(), &cfg).unwrap();
        assert_eq!(counted.decoder_calls(), 4);
    }

    #[test]
    fn uniform_log_prior_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in Prior::UniformLog.draw::<f64, _>(200, &mut rng) {
            assert!(v.a.abs() <= 1.0 && v.b.abs() <= 1.0);
            assert!(v.lw <= 0.0 && v.lw >= MIN_BOX_SCALE.ln());
        }
    }
}
