use std::collections::BTreeSet;

use dpa_core::attention::AttentionVariant;
use dpa_core::autodiff::{grad_check_module, Ctx, GradCheckOptions, Mode, Tape};
use dpa_core::losses::{lsce_loss, LsceParams};
use dpa_core::model::{BackboneConfig, Model};
use dpa_core::{DpaError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(&[n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

// Closed-form parameter counts, written out independently of the builder.
fn conv_bn(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + 2 * c_out
}

fn obr(c: usize, k: usize) -> usize {
    k * c * c * 9 + c * k + k + 2 * c
}

fn cpa(c: usize, k: usize) -> usize {
    c * c + c + 2 * obr(c, k)
}

fn spa(c: usize, hw: usize, k: usize) -> usize {
    hw * hw + hw + c * 2 * hw + c + 2 * obr(c, k)
}

fn expected_params(cfg: &BackboneConfig) -> usize {
    let k = cfg.dpa.num_kernels;
    let mut total = conv_bn(3, cfg.stage_channels[0], 3);
    let mut c_in = cfg.stage_channels[0];
    for (s, (&c, &blocks)) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
        for b in 0..blocks {
            total += conv_bn(c_in, c, 3) + conv_bn(c, c, 3);
            if (s > 0 && b == 0) || c_in != c {
                total += conv_bn(c_in, c, 1);
            }
            c_in = c;
        }
        if cfg.dpa_after_stage.contains(&s) {
            let hw = (cfg.input_size.0 >> s) * (cfg.input_size.1 >> s);
            total += match cfg.attention {
                AttentionVariant::Dual => cpa(c, k) + spa(c, hw, k),
                AttentionVariant::ChannelOnly => cpa(c, k),
                AttentionVariant::SpatialOnly => spa(c, hw, k),
            };
        }
    }
    let d = *cfg.stage_channels.last().unwrap();
    total + 2 * d + d * cfg.num_classes
}

#[test]
fn same_seed_same_parameters() {
    let cfg = BackboneConfig::default();
    let a = Model::build(&cfg, 7).unwrap();
    let b = Model::build(&cfg, 7).unwrap();
    let c = Model::build(&cfg, 8).unwrap();
    for (pa, pb) in a.store.params().iter().zip(b.store.params()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.value, pb.value);
    }
    assert!(a.store.params().iter().zip(c.store.params()).any(|(x, y)| x.value != y.value));
}

#[test]
fn parameter_count_matches_closed_form() {
    let base = BackboneConfig {
        dpa_after_stage: BTreeSet::new(),
        ..BackboneConfig::default()
    };
    let plain = Model::build(&base, 1).unwrap();
    assert_eq!(plain.num_params(), expected_params(&base));

    let with = BackboneConfig::default();
    let model = Model::build(&with, 1).unwrap();
    assert_eq!(model.num_params(), expected_params(&with));
    let (c, hw, k) = (64, 64, 4);
    assert_eq!(model.num_params(), plain.num_params() + cpa(c, k) + spa(c, hw, k));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let stages = rng.gen_range(1..=4);
        let channels: Vec<usize> = (0..stages).map(|_| rng.gen_range(2..12)).collect();
        let blocks: Vec<usize> = (0..stages).map(|_| rng.gen_range(1..3)).collect();
        let mut after = BTreeSet::new();
        for s in 0..stages {
            if rng.gen_bool(0.5) {
                after.insert(s);
            }
        }
        let variant = [AttentionVariant::Dual, AttentionVariant::ChannelOnly, AttentionVariant::SpatialOnly]
            [rng.gen_range(0..3)];
        let mut cfg = BackboneConfig {
            stage_channels: channels,
            blocks_per_stage: blocks,
            input_size: (16, 8),
            dpa_after_stage: after,
            attention: variant,
            num_classes: rng.gen_range(2..9),
            ..BackboneConfig::default()
        };
        cfg.dpa.num_kernels = rng.gen_range(1..5);
        let m = Model::build(&cfg, 5).unwrap();
        assert_eq!(m.num_params(), expected_params(&cfg), "{cfg:?}");
    }
}

#[test]
fn rejects_invalid_configs() {
    let bad = [
        BackboneConfig {
            blocks_per_stage: vec![1, 1],
            ..BackboneConfig::default()
        },
        BackboneConfig {
            dpa_after_stage: BTreeSet::from([4]),
            ..BackboneConfig::default()
        },
        BackboneConfig {
            input_size: (30, 32),
            ..BackboneConfig::default()
        },
        BackboneConfig {
            num_classes: 1,
            ..BackboneConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(Model::build(&cfg, 0), Err(DpaError::ConfigInvalid(_))), "{cfg:?}");
    }
}

#[test]
fn output_shapes_and_eval_determinism() {
    let cfg = BackboneConfig::default();
    let mut model = Model::build(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = images(&mut rng, 4, 32, 32);
    let run = |model: &mut Model, mode| {
        let tape = Tape::new();
        let mut cx = Ctx::new(&tape, &mut model.store, mode);
        let xv = tape.constant(x.clone());
        let out = model.net.forward(&mut cx, xv).unwrap();
        (
            (*tape.value(out.embedding)).clone(),
            (*tape.value(out.logits)).clone(),
        )
    };
    let (emb, logits) = run(&mut model, Mode::Train);
    assert_eq!(emb.shape(), &[4, 128]);
    assert_eq!(logits.shape(), &[4, cfg.num_classes]);
    let a = run(&mut model, Mode::Eval);
    let b = run(&mut model, Mode::Eval);
    assert_eq!(a, b);
    assert_eq!(model.embed(&x, 3).unwrap(), a.0);
}

#[test]
fn rejects_wrong_image_size() {
    let mut model = Model::build(&BackboneConfig::default(), 2).unwrap();
    let tape = Tape::new();
    let mut cx = Ctx::new(&tape, &mut model.store, Mode::Eval);
    let xv = tape.constant(Tensor::zeros(&[1, 3, 16, 16]).unwrap());
    assert!(matches!(
        model.net.forward(&mut cx, xv),
        Err(DpaError::SpatialSizeMismatch { expected: (32, 32), got: (16, 16) })
    ));
}

#[test]
fn full_model_gradients() {
    let cfg = BackboneConfig::default();
    let mut model = Model::build(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = images(&mut rng, 2, 32, 32);
    let labels = [3, 11];
    let net = model.net.clone();
    let err = grad_check_module(
        &mut model.store,
        &x,
        Mode::Eval,
        |cx, x| {
            let out = net.forward(cx, x)?;
            lsce_loss(cx.tape, out.logits, &labels, &LsceParams::default())
        },
        &GradCheckOptions::sampled(200, 9),
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}
