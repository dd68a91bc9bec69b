use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, SourceScene, TrainingSample};
use super::{adam_step, AdamState, Network, TrainConfig};
use crate::confidence::{channel_confidence, rb_confidence, uniform_confidence, LevelStatistic};
use crate::error::{invalid, Result};
use crate::rng::{item_rng, Stage};

/// Batch-mean loss terms before the update of `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub adam: AdamState,
    pub log: Vec<TrainLogRow>,
}

/// One batch for a step; depends only on (seed, step), so resumed runs draw
/// the same batches.
pub fn make_batch(
    scenes: &[SourceScene],
    size: usize,
    config: &TrainConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<TrainingSample>> {
    let mut pick = item_rng(seed, Stage::Batch, step);
    let mut aug = item_rng(seed, Stage::Augment, step);
    (0..config.batch_size)
        .map(|_| {
            let a = &scenes[pick.random_range(0..scenes.len())];
            let b = &scenes[pick.random_range(0..scenes.len())];
            augment(a, b, size, config.p_concat, &mut aug)
        })
        .collect()
}

/// Runs Adam from `adam.step` up to `config.max_steps`. `on_step` sees the
/// state after every update.
pub fn train<F>(
    mut network: Network,
    adam: Option<AdamState>,
    scenes: &[SourceScene],
    config: &TrainConfig,
    seed: u64,
    mut on_step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Network, &AdamState, &TrainLogRow) -> Result<()>,
{
    config.validate()?;
    if scenes.is_empty() {
        return Err(invalid("training set is empty"));
    }
    for s in scenes {
        s.validate()?;
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(network.param_count()));
    let size = network.spec().input_size;
    let mut log = Vec::new();
    let scale = 1.0 / config.batch_size as f64;
    while (adam.step as usize) < config.max_steps {
        let step = adam.step + 1;
        let batch = make_batch(scenes, size, config, seed, step)?;
        let mut grad = vec![0.0; network.param_count()];
        let mut row = TrainLogRow {
            step,
            l1: 0.0,
            l2: 0.0,
            penalty: 0.0,
            total: 0.0,
        };
        for sample in &batch {
            let parts = network.accumulate_gradient(
                &sample.input,
                &sample.target,
                config,
                scale,
                &mut grad,
                None,
            )?;
            row.l1 += parts.l1 * scale;
            row.l2 += parts.l2 * scale;
            row.penalty += parts.penalty * scale;
            row.total += parts.total * scale;
        }
        adam_step(network.params_mut(), &grad, &mut adam, config)?;
        on_step(&network, &adam, &row)?;
        log.push(row);
    }
    Ok(TrainOutcome { network, adam, log })
}

/// Mean level statistic of the network's fields over (at most `limit`)
/// non-augmented training scenes; `None` when it is not positive and finite.
pub fn confidence_training_mean(
    network: &Network,
    scenes: &[SourceScene],
    statistic: LevelStatistic,
    limit: usize,
) -> Result<Option<f64>> {
    let size = network.spec().input_size;
    let mut sum = 0.0;
    let mut n = 0usize;
    for scene in scenes.iter().take(limit) {
        let sample = TrainingSample::from_scene(scene, size)?;
        let field = network.forward(&sample.input)?;
        let maps = channel_confidence(&sample.input, &field)?;
        sum += match statistic {
            LevelStatistic::Uniform => uniform_confidence(&maps),
            LevelStatistic::Rb => rb_confidence(&maps),
        };
        n += 1;
    }
    let mean = sum / n.max(1) as f64;
    Ok((n > 0 && mean > 0.0 && mean.is_finite()).then_some(mean))
}
