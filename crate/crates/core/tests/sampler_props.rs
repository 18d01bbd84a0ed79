use flowdet::data::Image;
use flowdet::flowpath::{interpolate, target_velocity};
use flowdet::geometry::FlowVector;
use flowdet::model::{DecoderOutput, Detector, FeatureMap, ModelConfig};
use flowdet::sampler::{integrate, sample, CountingField, Prior, SamplerConfig, Solver, VelocityField};
use flowdet::tensor::Tensor;
use flowdet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn empty_features() -> FeatureMap<f64> {
    FeatureMap {
        channels: 1,
        height: 1,
        width: 1,
        stride: 1,
        data: Tensor::zeros(&[1]),
    }
}

fn logits(n: usize) -> Vec<f64> {
    vec![0.0; 2 * n]
}

/// Returns the fixed displacement `x1 − x0` for each proposal slot.
struct ConstantField(Vec<FlowVector<f64>>);

impl VelocityField<f64> for ConstantField {
    fn encode(&self, _: &Image<f64>) -> Result<FeatureMap<f64>> {
        Ok(empty_features())
    }

    fn velocity(&self, boxes: &[FlowVector<f64>], _: &FeatureMap<f64>, _: f64) -> Result<DecoderOutput<f64>> {
        Ok(DecoderOutput {
            velocities: self.0[..boxes.len()].to_vec(),
            class_logits: logits(boxes.len()),
            num_classes: 2,
        })
    }
}

/// The exact conditional field toward fixed targets, `(x1 − x)/(1 − t)`.
struct TowardTargets(Vec<FlowVector<f64>>);

impl VelocityField<f64> for TowardTargets {
    fn encode(&self, _: &Image<f64>) -> Result<FeatureMap<f64>> {
        Ok(empty_features())
    }

    fn velocity(&self, boxes: &[FlowVector<f64>], _: &FeatureMap<f64>, t: f64) -> Result<DecoderOutput<f64>> {
        Ok(DecoderOutput {
            velocities: boxes
                .iter()
                .zip(&self.0)
                .map(|(x, y)| y.sub(*x).scale(1.0 / (1.0 - t)))
                .collect(),
            class_logits: logits(boxes.len()),
            num_classes: 2,
        })
    }
}

fn random_flow(rng: &mut ChaCha8Rng, n: usize) -> Vec<FlowVector<f64>> {
    (0..n)
        .map(|_| {
            FlowVector::new(
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-3.0..0.0),
                rng.gen_range(-3.0..0.0),
            )
        })
        .collect()
}

fn max_dev(a: &[FlowVector<f64>], b: &[FlowVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

#[test]
fn constant_field_lands_on_target_for_every_step_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        let cfg = SamplerConfig {
            n_proposals: 16,
            noise_seed: trial,
            ..SamplerConfig::default()
        };
        let x0 = cfg.prior.draw::<f64, _>(16, &mut ChaCha8Rng::seed_from_u64(trial));
        let x1 = random_flow(&mut rng, 16);
        let field = ConstantField(x1.iter().zip(&x0).map(|(a, b)| a.sub(*b)).collect());
        for steps in [1, 2, 3, 10] {
            let out = sample(&field, &empty_features(), &SamplerConfig { steps, ..cfg.clone() }).unwrap();
            assert!(max_dev(&out.states, &x1) < 1e-10, "S={steps}");
        }
    }
}

#[test]
fn exact_conditional_field_is_solved_by_euler() {
    // Euler never evaluates at t = 1, where this field is singular
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random_flow(&mut rng, 10);
    let x1 = random_flow(&mut rng, 10);
    let field = TowardTargets(x1.clone());
    for steps in [1, 2, 3, 10] {
        let out = integrate(&field, &empty_features(), x0.clone(), steps, Solver::Euler).unwrap();
        assert!(max_dev(&out.states, &x1) < 1e-10, "S={steps}");
    }
}

#[test]
fn higher_order_solvers_are_exact_on_constant_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x0 = random_flow(&mut rng, 10);
    let x1 = random_flow(&mut rng, 10);
    let field = ConstantField(x1.iter().zip(&x0).map(|(a, b)| a.sub(*b)).collect());
    for solver in [Solver::Heun, Solver::Rk4] {
        for steps in [1, 2, 3, 10] {
            let out = integrate(&field, &empty_features(), x0.clone(), steps, solver).unwrap();
            assert!(max_dev(&out.states, &x1) < 1e-10, "{solver:?} S={steps}");
        }
    }
}

#[test]
fn flow_sampler_has_no_renewal_path() {
    let src = include_str!("../src/sampler.rs").to_lowercase();
    assert!(!src.contains("renew"));
}

#[test]
fn target_velocity_is_the_time_derivative_of_the_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    for _ in 0..100 {
        let x0 = Prior::StandardNormal.draw::<f64, _>(5, &mut rng);
        let x1 = random_flow(&mut rng, 5);
        let t = rng.gen_range(h..1.0 - h);
        let up = interpolate(&x0, &x1, t + h).unwrap();
        let down = interpolate(&x0, &x1, t - h).unwrap();
        let u = target_velocity(&x0, &x1).unwrap();
        for ((a, b), v) in up.iter().zip(&down).zip(&u) {
            let fd = a.sub(*b).scale(1.0 / (2.0 * h));
            let rel = fd.max_abs_diff(v) / v.to_array().iter().fold(1e-12f64, |m, x| m.max(x.abs()));
            assert!(rel < 1e-6);
        }
    }
}

fn tiny_model() -> Detector<f64> {
    Detector::new(ModelConfig::tiny(), 5).unwrap()
}

fn test_image() -> Image<f64> {
    let px = (0..64 * 64).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
    Image::new(64, 64, px).unwrap()
}

#[test]
fn sampling_is_deterministic_in_the_seed() {
    let model = tiny_model();
    let f = model.encode_image(&test_image()).unwrap();
    let cfg = SamplerConfig {
        n_proposals: 20,
        steps: 3,
        noise_seed: 9,
        ..SamplerConfig::default()
    };
    let a = sample(&model, &f, &cfg).unwrap();
    let b = sample(&model, &f, &cfg).unwrap();
    assert_eq!(a, b);
    let c = sample(
        &model,
        &f,
        &SamplerConfig {
            noise_seed: 10,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_ne!(a.states, c.states);
    assert_ne!(cfg.for_image(0).noise_seed, cfg.for_image(1).noise_seed);
    assert_eq!(cfg.for_image(4), cfg.for_image(4));
}

#[test]
fn encoder_runs_once_and_decoder_once_per_euler_step() {
    let model = tiny_model();
    let counter = CountingField::new(&model);
    let f = counter.encode(&test_image()).unwrap();
    for steps in [1, 3, 5] {
        let before = counter.decoder_calls();
        sample(
            &counter,
            &f,
            &SamplerConfig {
                steps,
                n_proposals: 8,
                ..SamplerConfig::default()
            },
        )
        .unwrap();
        assert_eq!(counter.decoder_calls() - before, steps);
    }
    assert_eq!(counter.encoder_calls(), 1);
}

#[test]
fn decoder_is_equivariant_to_proposal_order() {
    let mut model = tiny_model();
    // give the zero-initialised velocity head something to say
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let f = model.encode_image(&test_image()).unwrap();
    let boxes = random_flow(&mut rng, 9);
    let perm = [4usize, 0, 8, 2, 7, 1, 3, 6, 5];
    let permuted: Vec<_> = perm.iter().map(|&i| boxes[i]).collect();
    let a = model.decode(&boxes, &f, 0.4).unwrap();
    let b = model.decode(&permuted, &f, 0.4).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(b.velocities[k], a.velocities[i]);
        assert_eq!(b.logits(k), a.logits(i));
    }
    assert!(a.velocities.iter().any(|v| v.max_abs_diff(&FlowVector::zero()) > 1e-6));
}
