//! Shared fixtures for unit tests.

use rand::Rng as _;

use crate::model::{Model, ModelConfig};
use crate::rng::rng_from_seed;
use crate::tokens::TokenizerConfig;
use crate::world::{generate_clip, ExpertConfig, LoggedClip, ScenarioKind, ScenarioParams};

/// A small model whose zero-initialized outputs are randomized so every
/// parameter receives gradient.
pub fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        d_latent: 8,
        hidden: 8,
        pair_hidden: 4,
        descriptor_dim: 3,
        reactive_planners: 2,
        ..Default::default()
    };
    let mut m = Model::new(cfg, TokenizerConfig::default(), seed).unwrap();
    let mut rng = rng_from_seed(seed);
    for id in m.store.ids().collect::<Vec<_>>() {
        for v in m.store.value_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    m
}

pub fn clip(kind: ScenarioKind, seed: u64) -> LoggedClip {
    generate_clip(kind, seed, &ScenarioParams::default(), &ExpertConfig::default()).unwrap()
}

/// A run config small enough to drive every stage in a unit test.
pub fn tiny_run_config() -> crate::config::RunConfig {
    let mut cfg = crate::config::RunConfig::default();
    cfg.data.train_clips = 3;
    cfg.data.eval_clips = 2;
    cfg.scenario.duration_s = 12.0;
    cfg.scenario.max_agents = 5;
    cfg.model = ModelConfig { d_latent: 8, hidden: 8, pair_hidden: 4, descriptor_dim: 3, reactive_planners: 2, ..Default::default() };
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch_frames = 8;
    cfg.sft.epochs = 1;
    cfg.sft.starts_per_clip = 1;
    cfg.rl.epochs = 1;
    cfg.rl.max_skip_fraction = 1.0;
    cfg.rollout.horizon = 2;
    cfg.rollout.group_size = 2;
    cfg.rollout.n_reactive = 2;
    cfg.suite.seeds_per_clip = 1;
    cfg.ablation.seeds = 1;
    cfg
}
