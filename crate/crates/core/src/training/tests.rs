use super::*;
use crate::dataset::{generate_dataset, DatasetConfig};
use crate::geometry::RenderConfig;
use crate::model::ModelConfig;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 32,
        depth: 1,
        heads: 2,
        patch: 4,
        image_size: 16,
        views: 2,
        text_tokens: 2,
        mlp_ratio: 2,
        lora_rank: 4,
        lora_alpha: 4.0,
        ..ModelConfig::default()
    }
}

fn tiny_data(n: usize) -> Vec<PreparedSample> {
    let cfg = DatasetConfig {
        count: n,
        views: 2,
        render: RenderConfig {
            width: 16,
            height: 16,
            ..RenderConfig::default()
        },
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg).unwrap().iter().map(|s| PreparedSample::new(s, 4).unwrap()).collect()
}

#[test]
fn interpolation_endpoints_are_exact() {
    let x0 = Tensor::from_fn([3, 4], |i| i as f32 * 0.1 - 0.5);
    let e = Tensor::from_fn([3, 4], |i| (i as f32).sin());
    assert_eq!(DomainFlow::new(x0.clone(), e.clone(), 0.0).unwrap().xt, x0);
    assert_eq!(DomainFlow::new(x0.clone(), e.clone(), 1.0).unwrap().xt, e);
}

#[test]
fn oracle_prediction_has_zero_loss_and_mse_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = gaussian_like(&mut rng, &[16, 48]);
    let p0 = gaussian_like(&mut rng, &[16, 48]);
    let flow = FlowSample::draw(&mut rng, &x0, Some(&p0)).unwrap();

    let mut tape = Tape::<f32>::new();
    let a = tape.constant(flow.rgb.velocity()).unwrap();
    let b = tape.constant(flow.pointmap.as_ref().unwrap().velocity()).unwrap();
    let parts = velocity_loss(&mut tape, a, Some(b), &flow, 1.0, 1.0).unwrap();
    assert_eq!(tape.value(parts.total).item().unwrap(), 0.0);

    let guess_rgb = gaussian_like(&mut rng, &[16, 48]);
    let guess_pm = gaussian_like(&mut rng, &[16, 48]);
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(guess_rgb.clone()).unwrap();
    let b = tape.constant(guess_pm.clone()).unwrap();
    let parts = velocity_loss(&mut tape, a, Some(b), &flow, 1.0, 1.0).unwrap();
    let mut sum = 0.0f64;
    let mut n = 0;
    for (g, f) in [(&guess_rgb, &flow.rgb), (&guess_pm, flow.pointmap.as_ref().unwrap())] {
        for k in 0..g.numel() {
            let target = f.noise.data()[k] as f64 - f.x0.data()[k] as f64;
            sum += (g.data()[k] as f64 - target).powi(2);
            n += 1;
        }
    }
    let got = tape.value(parts.total).item().unwrap() as f64;
    assert!((got - sum / n as f64).abs() < 1e-6 * (1.0 + got), "{got} vs {}", sum / n as f64);
}

#[test]
fn dropout_extremes() {
    let t = Tensor::zeros([1, 1]);
    let input = ModelInput {
        target_rgb: &t,
        target_pm: None,
        views: Some(&[]),
        caption: Some(1),
        t: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (i, f) = apply_condition_dropout(input, &mut rng, 0.0);
        assert_eq!(f, DropFlags::default());
        assert!(i.caption.is_some() && i.views.is_some());
        let (i, f) = apply_condition_dropout(input, &mut rng, 1.0);
        assert!(f.text && f.reference);
        assert!(i.caption.is_none() && i.views.is_none());
    }
}

#[test]
fn lr_schedule_warms_up_then_holds() {
    let cfg = TrainConfig {
        warmup_steps: 9,
        ..TrainConfig::default()
    };
    assert!((cfg.lr_at(1) - 1e-4).abs() < 1e-12);
    assert_eq!(cfg.lr_at(10), 1e-3);
    assert_eq!(cfg.lr_at(5000), 1e-3);
    let cos = TrainConfig {
        cosine_decay: true,
        warmup_steps: 0,
        steps: 100,
        ..TrainConfig::default()
    };
    assert!((cos.lr_at(100) - 1e-4).abs() < 1e-12);
}

#[test]
fn resume_replays_the_same_trajectory() {
    let data = tiny_data(2);
    let cfg = TrainConfig {
        steps: 6,
        batch: 2,
        warmup_steps: 2,
        seed: 9,
        checkpoint_every: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(Model::new(tiny_model(), 1).unwrap(), cfg.clone()).unwrap();
    let a = full.run(&data, Some(dir.path()), |_| {}).unwrap();

    let model = Model::new(tiny_model(), 1).unwrap();
    let mut resumed = Trainer::resume(model, cfg, &checkpoint_path(dir.path(), 3)).unwrap();
    assert_eq!(resumed.step, 3);
    let b = resumed.run(&data, None, |_| {}).unwrap();
    assert_eq!(&a[3..], &b[..]);
    for id in full.model.params.ids() {
        assert_eq!(full.model.params.get(id), resumed.model.params.get(id));
    }
    let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(log.lines().count(), 7);
}

#[test]
fn domain_losses_are_logged_and_finite() {
    let data = tiny_data(1);
    let cfg = TrainConfig {
        steps: 3,
        batch: 1,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(Model::new(tiny_model(), 1).unwrap(), cfg).unwrap();
    for l in tr.run(&data, None, |_| {}).unwrap() {
        assert!(l.rgb.is_finite() && l.pm.is_finite() && l.rgb > 0.0 && l.pm > 0.0);
        assert!((l.total - 0.5 * (l.rgb + l.pm)).abs() < 1e-5 * l.total);
    }
}

#[test]
fn invalid_dropout_is_a_config_error() {
    let cfg = TrainConfig {
        dropout: 1.5,
        ..TrainConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
