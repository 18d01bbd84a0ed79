use flowdet::autograd::Graph;
use flowdet::data::{Dataset, SceneConfig};
use flowdet::losses::{build_loss, loss_and_gradients};
use flowdet::model::ModelConfig;
use flowdet::trainer::{
    read_history, run_ablation, train, HistoryRecord, TrainConfig, TrainOptions, TrainState, Variant, HISTORY_FILE,
    STATE_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_scenes(count: usize, seed: u64) -> Dataset<f32> {
    let cfg = SceneConfig {
        image_size: 64,
        seed,
        ..SceneConfig::default()
    };
    Dataset::generate(&cfg, 0, count).unwrap()
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 1,
        model: ModelConfig {
            image_size: 64,
            ..ModelConfig::tiny()
        },
        ..TrainConfig::default()
    };
    cfg.validation.every_epochs = 0;
    cfg
}

fn step_losses(history: &[HistoryRecord]) -> Vec<f64> {
    history
        .iter()
        .filter_map(|h| match h {
            HistoryRecord::Step { loss, .. } => Some(loss.total),
            _ => None,
        })
        .collect()
}

#[test]
fn one_epoch_takes_ceil_n_over_batch_steps() {
    let data = small_scenes(10, 1);
    for batch in [1, 3, 4, 10, 16] {
        let cfg = TrainConfig {
            batch_size: batch,
            ..small_config()
        };
        let out = train(&data, None, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(out.state.step, 10usize.div_ceil(batch), "batch {batch}");
        assert_eq!(step_losses(&out.history).len(), out.state.step);
        assert_eq!(out.state.epoch, 1);
    }
}

#[test]
fn logged_losses_satisfy_the_weighted_sum() {
    let data = small_scenes(8, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..small_config()
    };
    let out = train(&data, None, &cfg, TrainOptions::default()).unwrap();
    for h in &out.history {
        if let HistoryRecord::Step { loss, epoch, .. } = h {
            assert!(loss.satisfies_identity(&cfg.weights));
            assert!(*epoch >= 1);
        }
    }
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let data = small_scenes(4, 3);
    let cfg = TrainConfig {
        epochs: 400,
        ..small_config()
    };
    let out = train(&data, None, &cfg, TrainOptions::default()).unwrap();
    let losses = step_losses(&out.history);
    assert_eq!(losses.len(), 400);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&losses[..20]), mean(&losses[380..]));
    assert!(tail < 0.7 * head, "first 20 steps {head:.4}, last 20 steps {tail:.4}");
}

#[test]
fn interrupted_run_resumes_on_the_same_trajectory() {
    let data = small_scenes(10, 4);
    let cfg = TrainConfig {
        epochs: 3,
        ..small_config()
    };
    let straight_dir = tempfile::tempdir().unwrap();
    let straight = train(
        &data,
        None,
        &cfg,
        TrainOptions {
            out_dir: Some(straight_dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();

    // stop in the middle of the second epoch, then continue from disk
    let dir = tempfile::tempdir().unwrap();
    let first = train(
        &data,
        None,
        &cfg,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            max_steps: Some(4),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(first.state.step, 4);
    let state = TrainState::load(&dir.path().join(STATE_FILE), &cfg).unwrap();
    assert_eq!((state.step, state.epoch, state.batch_in_epoch), (4, 1, 1));
    let resumed = train(
        &data,
        None,
        &cfg,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: Some(state),
            ..TrainOptions::default()
        },
    )
    .unwrap();

    let a = step_losses(&straight.history);
    let b = step_losses(&read_history(&dir.path().join(HISTORY_FILE)).unwrap());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
    for ((_, n, p), (_, _, q)) in straight
        .state
        .model
        .params()
        .iter()
        .zip(resumed.state.model.params().iter())
    {
        assert_eq!(p.data(), q.data(), "{n}");
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let data = small_scenes(4, 5);
    let cfg = small_config();
    let state = TrainState::fresh(&cfg).unwrap();
    let other = TrainConfig {
        learning_rate: 2e-3,
        ..cfg
    };
    let opts = TrainOptions {
        resume: Some(state),
        ..TrainOptions::default()
    };
    assert!(train(&data, None, &other, opts).is_err());
}

#[test]
fn zero_flow_weight_is_the_box_regression_configuration() {
    let data = small_scenes(2, 6);
    let sample = &data.images[0];
    let state = TrainState::fresh(&small_config()).unwrap();
    let model = &state.model;

    let full = small_config();
    let zero = full
        .with_overrides(&serde_json::json!({"loss.lambda_flow": 0.0}))
        .unwrap();
    let boxes_only = TrainConfig {
        weights: full.weights.box_regression_only(),
        ..full.clone()
    };
    assert_eq!(zero, boxes_only);
    assert_eq!(zero.hash(), boxes_only.hash());

    let graph_len = |cfg: &TrainConfig| {
        let mut g = Graph::new();
        build_loss(
            &mut g,
            model,
            sample,
            &cfg.loss_config(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        g.len()
    };
    // the unweighted term is left out of the graph rather than scaled by zero
    assert!(graph_len(&zero) < graph_len(&full));
    assert_eq!(graph_len(&zero), graph_len(&boxes_only));

    let run = |cfg: &TrainConfig| {
        loss_and_gradients(sample, model, &cfg.loss_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    };
    let (lz, gz) = run(&zero);
    let (lb, gb) = run(&boxes_only);
    assert_eq!(lz, lb);
    for ((_, n, a), (_, _, b)) in gz.iter().zip(gb.iter()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn ablation_rows_follow_variants_and_repeat_exactly() {
    let train_set = small_scenes(6, 7);
    let test_set = small_scenes(3, 8);
    let cfg = small_config();
    let variants = vec![
        Variant {
            name: "no-flow".into(),
            overrides: serde_json::json!({"loss.lambda_flow": 0.0}),
        },
        Variant {
            name: "flow-0.2".into(),
            overrides: serde_json::json!({"loss.lambda_flow": 0.2}),
        },
        Variant {
            name: "flow-0.2-again".into(),
            overrides: serde_json::json!({"loss.lambda_flow": 0.2}),
        },
    ];
    let report = run_ablation(&cfg, &variants, &train_set, None, &test_set, 10, 2, None).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0].name, "no-flow");
    let (a, b) = (&report.rows[1], &report.rows[2]);
    assert_eq!((a.ap_10_50, a.precision, a.recall), (b.ap_10_50, b.precision, b.recall));
    assert_eq!(report.to_table().lines().count(), 4);
}
