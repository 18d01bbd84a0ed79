use flowdet::data::{generate_scene, scene_rng, AnnotatedImage, SceneConfig};
use flowdet::losses::{loss_and_gradients, training_loss, LossConfig, LossWeights, Objective};
use flowdet::model::{Detector, ModelConfig};
use flowdet::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_box_scene() -> AnnotatedImage<f64> {
    let cfg = SceneConfig {
        image_size: 64,
        n_objects_range: (2, 2),
        object_scale_range: (0.2, 0.4),
        ..SceneConfig::default()
    };
    generate_scene(&cfg, "g", &mut scene_rng(3, 0))
}

/// Tiny detector with every parameter, including the zero-initialised
/// velocity head, moved off its initial value so all paths carry gradient.
fn perturbed_model() -> Detector<f64> {
    let mut m = Detector::<f64>::new(ModelConfig::tiny(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    m
}

fn loss_value(model: &Detector<f64>, sample: &AnnotatedImage<f64>, cfg: &LossConfig) -> f64 {
    training_loss(sample, model, cfg, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap()
        .total
}

fn check(cfg: &LossConfig) {
    let sample = two_box_scene();
    assert_eq!(sample.gt_boxes.len(), 2);
    let mut model = perturbed_model();
    let (_, grads) = loss_and_gradients(&sample, &model, cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let names: Vec<(flowdet::autograd::ParamId, String)> =
        model.params().iter().map(|(id, n, _)| (id, n.to_string())).collect();
    for (id, name) in names {
        let analytic = grads.get(id).data().to_vec();
        let mut fd = vec![0.0; analytic.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = loss_value(&model, &sample, cfg);
            model.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = loss_value(&model, &sample, cfg);
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = fd.iter().zip(&analytic).map(|(a, b)| a - b).collect();
        let scale = norm(&fd).max(norm(&analytic));
        if scale < 1e-9 {
            continue;
        }
        let rel = norm(&diff) / scale;
        assert!(rel < 1e-3, "{name}: relative error {rel:e}");
        worst = worst.max(rel);
    }
    assert!(worst.is_finite());
}

fn config(objective: Objective) -> LossConfig {
    LossConfig {
        n_prop: 2,
        objective,
        ..LossConfig::default()
    }
}

#[test]
fn flow_loss_gradients_match_central_differences() {
    check(&config(Objective::Flow));
}

#[test]
fn diffusion_loss_gradients_match_central_differences() {
    check(&config(Objective::Diffusion));
}

#[test]
fn gradients_hold_with_every_term_weighted() {
    let mut cfg = config(Objective::Flow);
    cfg.weights = LossWeights {
        lambda_cls: 0.7,
        lambda_l1: 1.3,
        lambda_giou: 0.4,
        lambda_flow: 2.5,
    };
    cfg.fg_iou_threshold = 0.0;
    check(&cfg);
}

#[test]
fn single_precision_gradients_track_double() {
    let sample = two_box_scene();
    let m64 = perturbed_model();
    let m32 = m64.cast::<f32>();
    let s32 = AnnotatedImage {
        image: sample.image.cast::<f32>(),
        gt_boxes: sample.gt_boxes.iter().map(|b| b.cast::<f32>()).collect(),
        image_id: sample.image_id.clone(),
    };
    let cfg = config(Objective::Flow);
    let (l64, g64) = loss_and_gradients(&sample, &m64, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (l32, g32) = loss_and_gradients(&s32, &m32, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!((l64.total - l32.total).abs() < 1e-4 * l64.total.abs().max(1.0));
    for ((_, n, a), (_, _, b)) in g64.iter().zip(g32.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y.to_f64_lossy()).abs() < 1e-3 * (1.0 + x.abs()), "{n}");
        }
    }
}
