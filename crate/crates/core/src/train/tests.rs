use super::*;
use crate::testutil::{clip, tiny_model};
use crate::world::ScenarioKind;

fn quick_pretrain(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_frames: 2,
        optimizer: AdamWConfig { lr: 3e-3, warmup_steps: 0, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn frames_have_history_and_target() {
    let c = clip(ScenarioKind::StraightFollow, 1);
    let f = pretrain_frames(&c, 4, 0.5);
    assert_eq!(f[0], 1.5);
    assert!(f.windows(2).all(|w| (w[1] - w[0] - 0.5).abs() < 1e-9));
    assert!(*f.last().unwrap() + 0.5 <= c.duration() + 1e-9);
}

#[test]
fn pretraining_reduces_state_error_and_is_deterministic() {
    let clips = vec![clip(ScenarioKind::StraightFollow, 1), clip(ScenarioKind::Merge, 2)];
    let run = || {
        let mut m = tiny_model(3);
        let before = evaluate_state(&m, &clips, 0.5).unwrap();
        let mut rows = Vec::new();
        let out = pretrain(&mut m, &clips, &quick_pretrain(3), 9, &mut |r| {
            rows.push(r.fields().join(","));
            Ok(())
        })
        .unwrap();
        (before, evaluate_state(&m, &clips, 0.5).unwrap(), out, rows)
    };
    let (before, after, out, rows) = run();
    assert!(after.dyn_l1 < before.dyn_l1, "{before:?} -> {after:?}");
    assert_eq!(out.skipped, 0);
    assert_eq!(rows.len(), out.steps);
    assert_eq!(rows, run().3);
}

#[test]
fn sft_reduces_loss_on_a_repeated_clip() {
    let clips = vec![clip(ScenarioKind::StraightFollow, 4)];
    let rc = RolloutConfig { horizon: 2, n_reactive: 1, ..Default::default() };
    let cfg = SftConfig {
        epochs: 12,
        starts_per_clip: 2,
        optimizer: AdamWConfig { lr: 3e-3, warmup_steps: 0, ..Default::default() },
        ..Default::default()
    };
    let mut m = Model::new(crate::model::ModelConfig::default(), crate::tokens::TokenizerConfig::default(), 5).unwrap();
    let mut losses = Vec::new();
    let out = sft_train(&mut m, &clips, &rc, &cfg, 1, &mut |r| {
        losses.push(r.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(out.steps, 24);
    let head: f64 = losses[..4].iter().sum();
    let tail: f64 = losses[losses.len() - 4..].iter().sum();
    assert!(tail < head, "{losses:?}");
}

#[test]
fn bad_configs_are_rejected() {
    let clips = vec![clip(ScenarioKind::StraightFollow, 1)];
    let mut m = tiny_model(1);
    let cfg = PretrainConfig { batch_frames: 0, ..Default::default() };
    assert!(matches!(pretrain(&mut m, &clips, &cfg, 0, &mut |_| Ok(())), Err(TrainError::InvalidConfig(_))));
    let rc = RolloutConfig { horizon: 200, ..Default::default() };
    assert!(matches!(sft_train(&mut m, &clips, &rc, &SftConfig::default(), 0, &mut |_| Ok(())), Err(TrainError::NoSamples)));
}
