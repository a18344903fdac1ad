#![allow(dead_code)]

use hpdt_core::data::TaskBundle;
use hpdt_core::envs::{collect_meta_dataset, CollectConfig, Family};
use hpdt_core::model::{Mode, ModelConfig, ModelParams, PromptedBatch};
use hpdt_core::rng::stream;
use hpdt_core::trainer::{build_training_batch, data_rtg_scale};
use rand_distr::{Distribution, Normal};

pub fn tiny_data(family: Family, horizon: usize) -> (Vec<TaskBundle>, Vec<TaskBundle>) {
    let cfg = CollectConfig {
        family,
        n_train_tasks: 2,
        n_test_tasks: 2,
        episodes_per_task: 4,
        demos_per_task: 3,
        horizon,
        ..CollectConfig::default()
    };
    collect_meta_dataset(&cfg, 11).unwrap()
}

pub fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 4,
        dropout: 0.0,
        mode,
        demo_len: 4,
        k: 2,
        max_timestep: 16,
        ..ModelConfig::default()
    }
}

/// Config with the rtg scale resolved the way the trainer does it.
pub fn resolved(mut cfg: ModelConfig, bundles: &[TaskBundle]) -> ModelConfig {
    cfg.rtg_scale = Some(data_rtg_scale(bundles));
    cfg
}

/// Parameters moved away from the structured initialization so no coordinate is special.
pub fn generic_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = stream(seed, &[99]);
    let n = Normal::new(0.0, 0.3).unwrap();
    for q in p.store.iter_mut() {
        q.value.data_mut().iter_mut().for_each(|v| *v += n.sample(&mut rng));
    }
    p
}

pub fn tiny_batch(bundles: &[TaskBundle], cfg: &ModelConfig, rows: usize, update: u64) -> PromptedBatch {
    build_training_batch(bundles, cfg, rows, 5, update).unwrap()
}
