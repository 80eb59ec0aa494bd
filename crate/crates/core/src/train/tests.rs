use std::time::Instant;

use super::*;
use crate::config::ModelConfig;
use crate::data::{synth_sequence, SynthSpec};

fn seq(seed: u64) -> Sequence {
    synth_sequence(&SynthSpec { seed, frame_count: 12, ..SynthSpec::default() }).unwrap()
}

fn tiny_config() -> Config {
    let mut cfg = Config::toy();
    cfg.model = ModelConfig { d_model: 8, n_heads: 2, layers: 1, backbone_channels: 8, ffn_dim: Some(16), ..ModelConfig::default() };
    cfg
}

#[test]
fn unjittered_pair_is_centered() {
    let s = seq(1);
    let cfg = Config::toy();
    let pair = crop_pair(&s, 3, 3, (0.0, 0.0), 1.0, &cfg.tracker).unwrap();
    assert!((pair.gt.cx - 0.5).abs() < 1e-12 && (pair.gt.cy - 0.5).abs() < 1e-12);
    let b = s.gt[3];
    assert!((pair.gt.w - b.w / (4.0 * (b.w * b.h).sqrt())).abs() < 1e-12);
    assert_eq!(pair.template.shape(), [3, 32, 32]);
    assert_eq!(pair.search.shape(), [3, 64, 64]);
}

#[test]
fn oversized_shift_is_rejected() {
    let s = seq(1);
    assert!(crop_pair(&s, 0, 1, (0.6, 0.0), 1.0, &Config::toy().tracker).is_err());
}

#[test]
fn sampling_is_seeded() {
    let s = seq(2);
    let cfg = Config::toy();
    let a = sample_pair(&s, &cfg, &mut Rng::new(5)).unwrap();
    assert_eq!(a, sample_pair(&s, &cfg, &mut Rng::new(5)).unwrap());
}

#[test]
fn sampled_targets_stay_inside_the_crop() {
    let s = seq(3);
    let cfg = Config::toy();
    let mut rng = Rng::new(6);
    for _ in 0..1000 {
        let p = sample_pair(&s, &cfg, &mut rng).unwrap();
        assert!(p.gt.to_array().iter().all(|v| *v > 0.0 && *v < 1.0), "{:?}", p.gt);
    }
}

#[test]
fn sampling_needs_two_frames() {
    let mut s = seq(4);
    s.frames.truncate(1);
    s.gt.truncate(1);
    assert!(sample_pair(&s, &Config::toy(), &mut Rng::new(0)).is_err());
}

fn adam_cfg(lr: f64, wd: f64) -> OptimConfig {
    OptimConfig { lr, lr_backbone: lr, weight_decay: wd, ..OptimConfig::default() }
}

#[test]
fn first_adam_step_matches_hand_computation() {
    let mut p = vec![Tensor::scalar(1.0)];
    let mut st = OptimState::new(&p);
    let g = 0.5;
    adamw_update(&mut p, &[Tensor::scalar(g)], &mut st, &adam_cfg(0.1, 0.0));
    let m = (1.0 - 0.9) * g;
    let v = (1.0 - 0.999) * g * g;
    let (m_hat, v_hat) = (m / (1.0 - 0.9), v / (1.0 - 0.999));
    assert_eq!(st.m[0].item(), m);
    assert_eq!(st.v[0].item(), v);
    assert!((p[0].item() - (1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8))).abs() < 1e-15);
    assert_eq!(st.step, 1);
}

#[test]
fn decay_is_decoupled_from_the_gradient() {
    let mut p = vec![Tensor::scalar(2.0)];
    let mut st = OptimState::new(&p);
    adamw_update(&mut p, &[Tensor::scalar(0.0)], &mut st, &adam_cfg(0.1, 1e-2));
    assert!((p[0].item() - (2.0 - 0.1 * 1e-2 * 2.0)).abs() < 1e-15);
}

#[test]
fn step_decay_schedule() {
    let cfg = OptimConfig { decay_every: Some(2), ..adam_cfg(1.0, 0.0) };
    let rates: Vec<f64> = (1..=5).map(|s| learning_rate("head.cls", &cfg, s)).collect();
    assert_eq!(rates[..2], [1.0, 1.0]);
    assert!((rates[2] - 0.1).abs() < 1e-15 && (rates[4] - 0.01).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let s = seq(5);
    let mut cfg = tiny_config();
    cfg.optim.lr = 0.0;
    cfg.optim.lr_backbone = 0.0;
    let mut params = ModelParams::init(&cfg.model, &mut Rng::new(1)).unwrap();
    let before = params.clone();
    let mut optim = OptimState::new(&params);
    let batch = vec![sample_pair(&s, &cfg, &mut Rng::new(2)).unwrap()];
    let stats = train_step(&mut params, &mut optim, &batch, &cfg).unwrap();
    assert!(stats.loss.is_finite());
    let bits = |p: &ModelParams| p.leaves().into_iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    assert_eq!(bits(&params), bits(&before));
}

#[test]
fn parameter_groups_use_their_own_rates() {
    let s = seq(6);
    let mut cfg = tiny_config();
    cfg.optim.lr_backbone = 0.0;
    cfg.optim.lr = 1e-2;
    let mut params = ModelParams::init(&cfg.model, &mut Rng::new(3)).unwrap();
    let before = params.clone();
    let mut optim = OptimState::new(&params);
    let batch = vec![sample_pair(&s, &cfg, &mut Rng::new(4)).unwrap()];
    train_step(&mut params, &mut optim, &batch, &cfg).unwrap();
    assert_eq!(params.backbone, before.backbone);
    assert_ne!(params.fusion, before.fusion);
    assert_ne!(params.head, before.head);
}

#[test]
fn non_finite_parameter_is_named() {
    let s = seq(7);
    let cfg = tiny_config();
    let mut params = ModelParams::init(&cfg.model, &mut Rng::new(5)).unwrap();
    params.head.reg.layers[1].b.data_mut()[0] = f64::NAN;
    let mut optim = OptimState::new(&params);
    let batch = vec![sample_pair(&s, &cfg, &mut Rng::new(6)).unwrap()];
    match train_step(&mut params, &mut optim, &batch, &cfg) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("head.reg.1.b"), "{msg}"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

/// Overfits one fixed pair with the toy configuration.
fn overfit(max_steps: usize) -> (Vec<f64>, (f64, f64, f64), usize) {
    let s = seq(8);
    let cfg = Config::toy();
    let pair = crop_pair(&s, 2, 5, (0.05, -0.03), 1.0, &cfg.tracker).unwrap();
    let mut params = ModelParams::init(&cfg.model, &mut Rng::new(9)).unwrap();
    let mut optim = OptimState::new(&params);
    let batch = [pair.clone()];
    let mut losses = Vec::new();
    for step in 0..max_steps {
        losses.push(train_step(&mut params, &mut optim, &batch, &cfg).unwrap().loss);
        if step % 50 == 49 {
            let eval = evaluate_pair(&params, &pair, &cfg).unwrap();
            if eval.0 < 0.1 && eval.2 > 0.8 {
                return (losses, eval, step + 1);
            }
        }
    }
    let eval = evaluate_pair(&params, &pair, &cfg).unwrap();
    (losses, eval, max_steps)
}

#[test]
fn loss_trends_down_over_200_steps() {
    let (losses, _, _) = overfit(200);
    assert!(losses.iter().all(|l| l.is_finite()));
    let ma: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    // compare moving averages 20 steps apart
    let rising = ma.iter().step_by(20).collect::<Vec<_>>().windows(2).filter(|w| w[1] > w[0]).count();
    assert_eq!(rising, 0, "moving averages {:?}", ma.iter().step_by(20).collect::<Vec<_>>());
    assert!(ma[ma.len() - 1] < 0.5 * ma[0]);
}

#[test]
fn overfits_a_fixed_pair_within_2000_steps() {
    let start = Instant::now();
    let (_, (cls, _, best_iou), steps) = overfit(2000);
    eprintln!("overfit: {steps} steps, cls {cls:.4}, iou {best_iou:.3}, {:.1?}", start.elapsed());
    assert!(cls < 0.1, "classification loss {cls}");
    assert!(best_iou > 0.8, "best-box IoU {best_iou}");
}

#[test]
fn weight_file_round_trip_is_byte_stable() {
    let cfg = tiny_config();
    let p = ModelParams::init(&cfg.model, &mut Rng::new(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    save_model(&a, &p).unwrap();
    let loaded = load_model(&a, &cfg.model).unwrap();
    save_model(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(&std::fs::read(&a).unwrap()[..8], b"TRTW\x01\x00\x00\x00");
    // f32-representable weights survive exactly
    assert_eq!(load_model(&b, &cfg.model).unwrap(), loaded);
}

#[test]
fn reloaded_weights_train_identically() {
    let s = seq(11);
    let cfg = tiny_config();
    let p = decode_model(&encode_model(&ModelParams::init(&cfg.model, &mut Rng::new(12)).unwrap()), &ModelParams::init(&cfg.model, &mut Rng::new(0)).unwrap()).unwrap();
    let q = decode_model(&encode_model(&p), &p).unwrap();
    let run = |mut params: ModelParams| {
        let mut optim = OptimState::new(&params);
        let mut rng = Rng::new(13);
        (0..3)
            .map(|_| {
                let batch = vec![sample_pair(&s, &cfg, &mut rng).unwrap()];
                train_step(&mut params, &mut optim, &batch, &cfg).unwrap().loss.to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(p), run(q));
}

#[test]
fn corrupt_files_are_rejected() {
    let cfg = tiny_config();
    let p = ModelParams::init(&cfg.model, &mut Rng::new(14)).unwrap();
    let good = encode_model(&p);
    let like = ModelParams::init(&cfg.model, &mut Rng::new(0)).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_model(&bad_magic, &like), Err(Error::Load(m)) if m.contains("magic")));

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(matches!(decode_model(&bad_version, &like), Err(Error::Load(m)) if m.contains("version")));

    assert!(matches!(decode_model(&good[..good.len() - 3], &like), Err(Error::Load(m)) if m.contains("truncated")));

    let mut extra = good.clone();
    extra.extend_from_slice(&5u32.to_le_bytes());
    extra.extend_from_slice(b"bogus");
    extra.extend_from_slice(&1u32.to_le_bytes());
    extra.extend_from_slice(&1u32.to_le_bytes());
    extra.extend_from_slice(&1f32.to_le_bytes());
    assert!(matches!(decode_model(&extra, &like), Err(Error::Load(m)) if m.contains("unknown parameter bogus")));
}

#[test]
fn mismatched_width_names_the_parameter() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_model(&path, &ModelParams::init(&cfg.model, &mut Rng::new(15)).unwrap()).unwrap();
    let wider = ModelConfig { d_model: 12, ..cfg.model.clone() };
    match load_model(&path, &wider) {
        Err(Error::Load(msg)) => assert!(msg.contains("backbone.reduce_w") && msg.contains("shape"), "{msg}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}
