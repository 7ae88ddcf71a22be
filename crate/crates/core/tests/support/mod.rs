//! Toy tasks shared by the acceptance suite and integration tests.
#![allow(dead_code)]

use flowstate::data::{generate_synthetic, SinmixParams, Synthetic};
use flowstate::eval::EvalTask;
use flowstate::model::{Model, ModelConfig};
use flowstate::train::{TrainConfig, Trainer};

pub const SEASON: usize = 24;

/// Daily-like seasonality plus slower non-harmonic cycles, so repeating
/// the last season is a clearly beatable baseline.
pub fn sinmix(noise_std: f64, walk_std: f64) -> Synthetic {
    Synthetic::Sinmix(SinmixParams {
        min_components: 2,
        max_components: 3,
        anchor_period: Some(SEASON as f64),
        period_min: 30.0,
        period_max: 90.0,
        amplitude_min: 0.5,
        amplitude_max: 1.5,
        noise_std,
        walk_std,
        level: 5.0,
    })
}

pub fn toy_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        state_size: 16,
        hidden_size: 24,
        mlp_size: 48,
        context_length: 144,
        min_context: 20,
        t_base: SEASON,
        basis_n: 12,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

pub fn toy_train_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 8, learning_rate: 3e-3, min_lr_ratio: 0.1, seed, ..TrainConfig::default() }
}

pub fn series_pool(kind: &Synthetic, first_seed: u64, count: usize, len: usize) -> Vec<Vec<f64>> {
    (0..count as u64)
        .map(|i| generate_synthetic(kind, first_seed + i, len).expect("synthetic series").channel(0))
        .collect()
}

/// Training pool; disjoint seeds from the held-out tasks.
pub fn train_pool(kind: &Synthetic, seed: u64) -> Vec<Vec<f64>> {
    series_pool(kind, 1_000_000 + seed * 10_000, 64, 720)
}

/// Held-out series, long enough for subsampling by 5 with a full context.
pub fn heldout_series(kind: &Synthetic, count: usize) -> Vec<Vec<f64>> {
    series_pool(kind, 9_000_000, count, 1200)
}

/// Last `horizon` steps are targets.
pub fn task_from(id: String, x: &[f64], seasonality: f64, horizon: usize) -> EvalTask {
    let split = x.len() - horizon;
    EvalTask { id, history: x[..split].to_vec(), target: x[split..].to_vec(), seasonality }
}

/// Available history of the held-out windows, cycled across tasks. Real
/// evaluation windows rarely come with exactly the training context.
pub const HISTORY_LENGTHS: [usize; 5] = [48, 72, 96, 120, 144];

pub fn heldout_tasks(kind: &Synthetic, count: usize) -> Vec<EvalTask> {
    heldout_series(kind, count)
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let keep = HISTORY_LENGTHS[i % HISTORY_LENGTHS.len()] + SEASON;
            task_from(format!("toy-{i:03}"), &x[x.len() - keep..], SEASON as f64, SEASON)
        })
        .collect()
}

/// Held-out windows with the full series as history.
pub fn heldout_tasks_full_context(kind: &Synthetic, count: usize) -> Vec<EvalTask> {
    heldout_series(kind, count)
        .iter()
        .enumerate()
        .map(|(i, x)| task_from(format!("toy-{i:03}"), x, SEASON as f64, SEASON))
        .collect()
}

/// Every `k`-th step of each held-out series; the horizon covers one
/// original season.
pub fn resampled_tasks(kind: &Synthetic, count: usize, k: usize) -> Vec<EvalTask> {
    heldout_series(kind, count)
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let sub: Vec<f64> = x.iter().step_by(k).copied().collect();
            let h = ((SEASON as f64 / k as f64).round() as usize).max(1);
            task_from(format!("toy-{i:03}@{k}"), &sub, SEASON as f64 / k as f64, h)
        })
        .collect()
}

pub fn train(model_seed: u64, steps: usize, parallel: bool, kind: &Synthetic) -> Model {
    let model = Model::init(toy_model_config(model_seed)).expect("model");
    let cfg = TrainConfig { parallel_forecasts: parallel, ..toy_train_config(model_seed, steps) };
    let mut trainer = Trainer::new(model, cfg, train_pool(kind, model_seed)).expect("trainer");
    trainer.run(|_| {}).expect("training");
    trainer.model
}
