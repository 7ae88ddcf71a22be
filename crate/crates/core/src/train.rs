//! Training: window sampling, contiguous patch masking, the parallel
//! forecast loss, and Adam with cosine decay.

use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PinballTarget, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{decoder_on_tape, encoder_on_tape, input_features, Model, ModelConfig, ParamVars};
use crate::norm::causal_normalize_masked;
use crate::par;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Final learning rate as a fraction of the initial one.
    pub min_lr_ratio: f64,
    pub cpm_enabled: bool,
    pub patch_mask_prob: f64,
    /// Masked blocks span `1..=max_mask_patches` forecast lengths.
    pub max_mask_patches: usize,
    /// Predict from every anchor in `[min_context, L-1]`; when false only
    /// the last anchor contributes.
    pub parallel_forecasts: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            min_lr_ratio: 0.0,
            cpm_enabled: true,
            patch_mask_prob: 0.5,
            max_mask_patches: 3,
            parallel_forecasts: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.patch_mask_prob) {
            return Err(Error::Config("patch_mask_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("grad_clip and weight_decay must be non-negative".into()));
        }
        if self.cpm_enabled && self.max_mask_patches == 0 {
            return Err(Error::Config("max_mask_patches must be positive".into()));
        }
        Ok(())
    }

    /// Cosine-decayed learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.learning_rate;
        }
        let frac = (step as f64 / self.steps as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.learning_rate * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

/// One training window: `context` observed steps followed by enough
/// future values to score every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    /// Raw values, length `context + t_base - 1`. Non-finite entries are
    /// unobserved.
    pub window: Vec<f64>,
    pub context: usize,
    /// Encoder mask over the context: missing data or masked patches.
    pub missing: Vec<bool>,
}

impl TrainItem {
    /// Builds an item with only the data-missing mask.
    pub fn new(window: Vec<f64>, context: usize) -> Result<Self> {
        if context == 0 || context > window.len() {
            return Err(Error::Validation(format!(
                "context {context} does not fit a window of {}",
                window.len()
            )));
        }
        let missing = window[..context].iter().map(|v| !v.is_finite()).collect();
        Ok(Self { window, context, missing })
    }
}

/// Masks one contiguous block of `{1..=max_patches}·t_base` steps with
/// probability `prob`, never touching the first `min_context` steps.
/// Masked values are zeroed and flagged. Returns the masked range.
pub fn apply_cpm_mask(
    values: &mut [f64],
    missing: &mut [bool],
    t_base: usize,
    min_context: usize,
    prob: f64,
    max_patches: usize,
    rng: &mut impl Rng,
) -> Result<Option<Range<usize>>> {
    if values.len() != missing.len() {
        return Err(crate::error::dim("mask and value lengths differ"));
    }
    let len = values.len();
    if !rng.random_bool(prob.clamp(0.0, 1.0)) || len <= min_context || max_patches == 0 {
        return Ok(None);
    }
    let patches = rng.random_range(1..=max_patches);
    let block = (patches * t_base).min(len - min_context);
    if block == 0 {
        return Ok(None);
    }
    let start = rng.random_range(min_context..=len - block);
    for t in start..start + block {
        values[t] = 0.0;
        missing[t] = true;
    }
    Ok(Some(start..start + block))
}

/// 1-based anchors scored for an item with `context` steps.
pub fn anchor_range(context: usize, min_context: usize, parallel: bool) -> Result<Range<usize>> {
    if context < 2 || context <= min_context {
        return Err(Error::Validation(format!(
            "context {context} leaves no anchors after min_context {min_context}"
        )));
    }
    Ok(if parallel { min_context..context } else { context - 1..context })
}

/// Records the mean quantile loss over `anchors` (1-based) on `tape`.
/// Predictions are de-normalized with the statistics at each anchor and
/// compared with the unmasked window values.
pub fn record_item_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    phi: Arc<Mat>,
    item: &TrainItem,
    anchors: Range<usize>,
) -> Result<Var> {
    let t = config.t_base;
    if anchors.start == 0 || anchors.end > item.context || anchors.is_empty() {
        return Err(Error::Validation(format!("bad anchor range {anchors:?}")));
    }
    if item.window.len() < anchors.end - 1 + t {
        return Err(Error::Validation(format!(
            "window of {} too short for anchors {anchors:?} and horizon {t}",
            item.window.len()
        )));
    }
    let ctx = &item.window[..item.context];
    let (x_norm, stats) = causal_normalize_masked(ctx, Some(&item.missing), config.norm_variance_mode)?;
    let features = input_features(&x_norm, &item.missing)?;
    let f = tape.constant(features);
    let encoded = encoder_on_tape(tape, pv, f, 1.0)?;
    let pred = decoder_on_tape(tape, pv, encoded, anchors.start - 1, anchors.end - 1, phi, config.quantiles())?;
    let a = anchors.len();
    let mut target = Mat::zeros(a, t);
    let (mut mu, mut sigma) = (Vec::with_capacity(a), Vec::with_capacity(a));
    for (i, anchor) in anchors.clone().enumerate() {
        target.row_mut(i).copy_from_slice(&item.window[anchor..anchor + t]);
        mu.push(stats.mu[anchor - 1]);
        sigma.push(stats.sigma[anchor - 1]);
    }
    let tgt = PinballTarget { target, mu, sigma, levels: config.quantile_levels.clone() };
    tape.denorm_pinball(pred, Arc::new(tgt))
}

/// Loss and parameter gradients for one item.
pub fn item_loss_and_grads(model: &Model, phi: &Arc<Mat>, item: &TrainItem, parallel: bool) -> Result<(f64, Vec<Mat>)> {
    let anchors = anchor_range(item.context, model.config.min_context, parallel)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, &model.params);
    let loss = record_item_loss(&mut tape, &pv, &model.config, phi.clone(), item, anchors)?;
    let value = tape.value(loss)?.data[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads.param_grads(&model.params.shapes())))
}

/// Mean loss and gradients over a batch. Items are evaluated through
/// [`par::map_collect`] and reduced in input order.
pub fn batch_loss_and_grads(model: &Model, items: &[TrainItem], parallel: bool) -> Result<(f64, Vec<Mat>)> {
    if items.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let phi = Arc::new(model.basis_for(1.0, model.config.t_base)?);
    let results = par::map_collect(items, |item| item_loss_and_grads(model, &phi, item, parallel));
    let mut total = 0.0;
    let mut acc: Option<Vec<Mat>> = None;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(sum) => {
                for (s, g) in sum.iter_mut().zip(&grads) {
                    for (a, b) in s.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
            }
        }
    }
    let n = items.len() as f64;
    let mut grads = acc.unwrap_or_default();
    for g in &mut grads {
        g.data.iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, grads))
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub step: usize,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update with learning rate `lr`. Weight decay is
    /// decoupled from the gradient.
    pub fn update(&mut self, params: &mut [&mut Mat], grads: &[Mat], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(crate::error::dim(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(crate::error::dim(format!("tensor {i}: shape mismatch in optimizer")));
            }
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
                v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * p.data[j]);
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based step number.
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Drives optimization over a pool of univariate training series.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: AdamState,
    series: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, series: Vec<Vec<f64>>) -> Result<Self> {
        let optimizer = AdamState::new(&model.params.shapes());
        Self::resume(model, config, optimizer, series)
    }

    /// Continues from a saved optimizer state. Because each step's
    /// randomness is derived from `(seed, step)`, a resumed run matches an
    /// uninterrupted one.
    pub fn resume(model: Model, config: TrainConfig, optimizer: AdamState, series: Vec<Vec<f64>>) -> Result<Self> {
        model.config.validate()?;
        config.validate()?;
        let shapes = model.params.shapes();
        if optimizer.m.iter().map(|m| m.shape()).ne(shapes.iter().copied()) {
            return Err(crate::error::dim("optimizer state does not match model shapes"));
        }
        let need = model.config.min_context + model.config.t_base + 1;
        let series: Vec<Vec<f64>> = series.into_iter().filter(|s| s.len() >= need).collect();
        if series.is_empty() {
            return Err(Error::Validation(format!("no training series with at least {need} steps")));
        }
        Ok(Self { model, config, optimizer, series })
    }

    pub fn step_count(&self) -> usize {
        self.optimizer.step
    }

    /// Random generator for 0-based `step`.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);
        rng
    }

    /// Draws the batch for 0-based `step`.
    pub fn sample_batch(&self, step: usize) -> Result<Vec<TrainItem>> {
        let mut rng = self.step_rng(step);
        let mc = &self.model.config;
        (0..self.config.batch_size)
            .map(|_| {
                let s = &self.series[rng.random_range(0..self.series.len())];
                let context = mc.context_length.min(s.len() + 1 - mc.t_base);
                let width = context + mc.t_base - 1;
                let start = rng.random_range(0..=s.len() - width);
                let mut item = TrainItem::new(s[start..start + width].to_vec(), context)?;
                if self.config.cpm_enabled {
                    let mut ctx = item.window[..context].to_vec();
                    apply_cpm_mask(
                        &mut ctx,
                        &mut item.missing,
                        mc.t_base,
                        mc.min_context,
                        self.config.patch_mask_prob,
                        self.config.max_mask_patches,
                        &mut rng,
                    )?;
                }
                Ok(item)
            })
            .collect()
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepLog> {
        let start = Instant::now();
        let step = self.optimizer.step;
        let batch = self.sample_batch(step)?;
        let (loss, mut grads) = batch_loss_and_grads(&self.model, &batch, self.config.parallel_forecasts)?;
        let norm = global_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite { step: step + 1, detail: format!("loss {loss}, gradient norm {norm}") });
        }
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let scale = self.config.grad_clip / norm;
            grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= scale));
        }
        let lr = self.config.lr_at(step);
        let mut params = self.model.params.tensors_mut();
        self.optimizer.update(&mut params, &grads, lr, &self.config)?;
        if !self.model.params.is_finite() {
            return Err(Error::NonFinite { step: step + 1, detail: "parameters became non-finite".into() });
        }
        let max_re = self.model.params.max_real_eigenvalue();
        if !(max_re < 0.0) {
            return Err(Error::NonFinite { step: step + 1, detail: format!("eigenvalue real part {max_re}") });
        }
        Ok(StepLog { step: step + 1, loss, grad_norm: norm, lr, wall_time: start.elapsed().as_secs_f64() })
    }

    /// Steps until `config.steps` updates have been applied.
    pub fn run(&mut self, on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        self.run_to(self.config.steps, on_step)
    }

    /// Steps until `until` updates (capped at `config.steps`) have been
    /// applied.
    pub fn run_to(&mut self, until: usize, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let until = until.min(self.config.steps);
        let mut logs = Vec::new();
        while self.optimizer.step < until {
            let log = self.step()?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Writes `step,loss,grad_norm,lr,wall_time` rows.
pub fn write_log_csv(path: &std::path::Path, logs: &[StepLog], append: bool) -> Result<()> {
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!(append && exists)).from_writer(file);
    for l in logs {
        w.serialize(l).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisFamily;
    use crate::model::Model;

    fn tiny() -> Model {
        Model::init(ModelConfig {
            num_layers: 1,
            state_size: 4,
            hidden_size: 6,
            mlp_size: 8,
            context_length: 24,
            min_context: 4,
            t_base: 5,
            basis: BasisFamily::Legendre,
            basis_n: 4,
            quantile_levels: vec![0.1, 0.5, 0.9],
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn wave(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|t| 3.0 + (t as f64 * 0.7 + phase).sin()).collect()
    }

    /// Independent per-anchor computation: encode once, decode each anchor
    /// with the inference path and score it directly.
    fn per_anchor_oracle(model: &Model, item: &TrainItem, anchors: Range<usize>) -> f64 {
        let ctx = &item.window[..item.context];
        let enc = model.encode_channel(ctx, &item.missing, 1.0).unwrap();
        let t = model.config.t_base;
        let phi = model.basis_for(1.0, t).unwrap();
        let (k, n) = (model.config.quantiles(), model.config.basis_n);
        let mut total = 0.0;
        let mut count = 0;
        for a in anchors {
            let coeffs = model.coefficients(enc.outputs.row(a - 1)).unwrap();
            let (mu, sigma) = enc.stats.at(a).unwrap();
            for step in 0..t {
                let y = item.window[a + step];
                for q in 0..k {
                    let z: f64 = (0..n).map(|i| coeffs[q * n + i] * phi.get(step, i)).sum();
                    total += crate::autodiff::pinball(model.config.quantile_levels[q], y - (z * sigma + mu));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn parallel_loss_matches_per_anchor_recomputation() {
        let model = tiny();
        let item = TrainItem::new(wave(24 + 4, 0.3), 24).unwrap();
        let phi = Arc::new(model.basis_for(1.0, 5).unwrap());
        let (loss, _) = item_loss_and_grads(&model, &phi, &item, true).unwrap();
        let oracle = per_anchor_oracle(&model, &item, 4..24);
        assert!((loss - oracle).abs() < 1e-12 * oracle.max(1.0), "{loss} vs {oracle}");
        let (single, _) = item_loss_and_grads(&model, &phi, &item, false).unwrap();
        let oracle = per_anchor_oracle(&model, &item, 23..24);
        assert!((single - oracle).abs() < 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn one_anchor_when_min_context_is_last() {
        assert_eq!(anchor_range(24, 23, true).unwrap(), 23..24);
        assert_eq!(anchor_range(2048, 20, true).unwrap().len(), 2028);
        assert!(anchor_range(20, 20, true).is_err());
    }

    #[test]
    fn cpm_mask_respects_warmup_and_block_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hits = 0;
        for _ in 0..400 {
            let mut x = vec![1.0; 100];
            let mut m = vec![false; 100];
            if let Some(r) = apply_cpm_mask(&mut x, &mut m, 10, 20, 0.5, 3, &mut rng).unwrap() {
                hits += 1;
                assert!(r.start >= 20 && r.end <= 100);
                assert!([10, 20, 30].contains(&r.len()));
                assert!(m[r.clone()].iter().all(|&b| b) && x[r.clone()].iter().all(|&v| v == 0.0));
                assert_eq!(m.iter().filter(|&&b| b).count(), r.len());
            }
        }
        assert!((150..250).contains(&hits), "{hits}");
        // A block longer than the available tail is truncated, not placed
        // inside the protected prefix.
        let mut x = vec![1.0; 25];
        let mut m = vec![false; 25];
        let r = apply_cpm_mask(&mut x, &mut m, 30, 20, 1.0, 3, &mut rng).unwrap().unwrap();
        assert_eq!(r, 20..25);
        assert!(m[..20].iter().all(|&b| !b));
    }

    #[test]
    fn masked_patch_targets_use_original_values() {
        let model = tiny();
        let mut item = TrainItem::new(wave(28, 0.0), 24).unwrap();
        for t in 10..20 {
            item.missing[t] = true;
        }
        let phi = Arc::new(model.basis_for(1.0, 5).unwrap());
        let (loss, _) = item_loss_and_grads(&model, &phi, &item, true).unwrap();
        assert!((loss - per_anchor_oracle(&model, &item, 4..24)).abs() < 1e-12);
        // The encoder never sees raw values under the mask.
        let mut poisoned = item.window[..24].to_vec();
        for v in &mut poisoned[10..20] {
            *v = 1e6;
        }
        let a = model.encode_channel(&item.window[..24], &item.missing, 1.0).unwrap();
        let b = model.encode_channel(&poisoned, &item.missing, 1.0).unwrap();
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig { steps: 100, min_lr_ratio: 0.1, ..TrainConfig::default() };
        assert!((c.lr_at(0) - 1e-3).abs() < 1e-15);
        assert!((c.lr_at(50) - 1e-3 * 0.55).abs() < 1e-12);
        assert!((c.lr_at(100) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Mat::row_vector(vec![1.0, -2.0, 0.5]);
        let g = Mat::row_vector(vec![0.3, -4.0, 0.0]);
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&[(1, 3)]);
        st.update(&mut [&mut p], &[g], 0.01, &cfg).unwrap();
        assert!((p.data[0] - 0.99).abs() < 1e-6);
        assert!((p.data[1] + 1.99).abs() < 1e-6);
        assert_eq!(p.data[2], 0.5);
    }

    #[test]
    fn training_reduces_loss_and_resume_is_exact() {
        let series: Vec<Vec<f64>> = (0..4).map(|i| wave(80, i as f64)).collect();
        let cfg = TrainConfig { steps: 30, batch_size: 3, learning_rate: 1e-2, seed: 9, ..TrainConfig::default() };
        let mut full = Trainer::new(tiny(), cfg.clone(), series.clone()).unwrap();
        let logs = full.run(|_| {}).unwrap();
        assert_eq!(logs.len(), 30);
        let head: f64 = logs[..5].iter().map(|l| l.loss).sum();
        let tail: f64 = logs[25..].iter().map(|l| l.loss).sum();
        assert!(tail < head, "{head} -> {tail}");

        let mut part = Trainer::new(tiny(), cfg.clone(), series.clone()).unwrap();
        part.run_to(12, |_| {}).unwrap();
        let mut resumed = Trainer::resume(part.model.clone(), cfg, part.optimizer.clone(), series).unwrap();
        resumed.run(|_| {}).unwrap();
        assert!(resumed.model == full.model);
    }

    #[test]
    fn nan_targets_are_skipped() {
        let model = tiny();
        let mut w = wave(28, 0.0);
        w[27] = f64::NAN;
        let item = TrainItem::new(w, 24).unwrap();
        let phi = Arc::new(model.basis_for(1.0, 5).unwrap());
        let (loss, grads) = item_loss_and_grads(&model, &phi, &item, true).unwrap();
        assert!(loss.is_finite() && grads.iter().all(|g| g.is_finite()));
    }
}
