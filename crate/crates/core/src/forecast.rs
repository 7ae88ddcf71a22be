//! Zero-shot inference at an arbitrary sampling rate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::basis::effective_horizon;
use crate::error::{Error, Result};
use crate::model::{Model, BASE_SEASONALITY};
use crate::par;
use crate::tensor::Mat;

/// How forecasts longer than one decoded patch are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Masked placeholders extend the input; one patch per anchor.
    #[default]
    Mpi,
    /// Median forecasts are fed back as observations.
    Autoregressive,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Mpi => "mpi",
            Mode::Autoregressive => "autoregressive",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mpi" => Ok(Mode::Mpi),
            "autoregressive" | "ar" => Ok(Mode::Autoregressive),
            other => Err(Error::Config(format!("unknown forecast mode `{other}`"))),
        }
    }
}

/// Sampling adjustment that maps the task's seasonality onto the base one.
pub fn scale_factor(seasonality: f64) -> Result<f64> {
    if !(seasonality > 0.0 && seasonality.is_finite()) {
        return Err(Error::Domain(format!("seasonality must be positive, got {seasonality}")));
    }
    Ok(BASE_SEASONALITY / seasonality)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seasonality: f64,
    pub horizon: usize,
    /// Replaces the seasonality-derived scale factor.
    pub scale_override: Option<f64>,
    /// Upper bound on the context, in steps; defaults to the model's
    /// training context.
    pub context_budget: Option<usize>,
}

impl TaskSpec {
    pub fn new(seasonality: f64, horizon: usize) -> Self {
        Self { seasonality, horizon, scale_override: None, context_budget: None }
    }

    pub fn s_delta(&self) -> Result<f64> {
        match self.scale_override {
            Some(s) if s > 0.0 && s.is_finite() => Ok(s),
            Some(s) => Err(Error::Domain(format!("scale override must be positive, got {s}"))),
            None => scale_factor(self.seasonality),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveLengths {
    pub s_delta: f64,
    /// Context steps fed to the encoder.
    pub context: usize,
    /// Steps decoded per anchor.
    pub t_eff: usize,
}

/// Context covering the training context's physical span, capped by the
/// budget, and the per-anchor horizon.
pub fn effective_lengths(model: &Model, task: &TaskSpec) -> Result<EffectiveLengths> {
    let s = task.s_delta()?;
    let budget = task.context_budget.unwrap_or(model.config.context_length).max(1);
    let span = ((model.config.context_length as f64 / s).round() as usize).max(1);
    Ok(EffectiveLengths { s_delta: s, context: span.min(budget), t_eff: effective_horizon(model.config.t_base, s) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub mode: Mode,
    pub lengths: EffectiveLengths,
    pub levels: Vec<f64>,
    /// One `horizon × K` matrix per channel, quantiles sorted per step.
    pub channels: Vec<Mat>,
}

impl Forecast {
    pub fn horizon(&self) -> usize {
        self.channels.first().map_or(0, |m| m.rows)
    }

    /// Median path of channel `c`.
    pub fn median(&self, c: usize) -> Vec<f64> {
        let k = crate::model::median_index(&self.levels);
        let m = &self.channels[c];
        (0..m.rows).map(|t| m.get(t, k)).collect()
    }
}

/// Forecasts every channel of `history` (`length × channels`). Non-finite
/// values are unobserved. Channels are independent and run in parallel.
pub fn forecast(model: &Model, history: &Mat, task: &TaskSpec, mode: Mode) -> Result<Forecast> {
    if task.horizon == 0 {
        return Err(Error::Validation("horizon must be positive".into()));
    }
    if history.rows == 0 || history.cols == 0 {
        return Err(Error::Validation("history is empty".into()));
    }
    let lengths = effective_lengths(model, task)?;
    let chans: Vec<Vec<f64>> = (0..history.cols).map(|c| (0..history.rows).map(|t| history.get(t, c)).collect()).collect();
    let out = par::map_collect(&chans, |x| {
        let start = x.len().saturating_sub(lengths.context);
        forecast_channel(model, &x[start..], task.horizon, lengths, mode)
    });
    Ok(Forecast { mode, lengths, levels: model.config.quantile_levels.clone(), channels: out.into_iter().collect::<Result<_>>()? })
}

/// Univariate forecast from an already trimmed context.
pub fn forecast_channel(model: &Model, context: &[f64], horizon: usize, lengths: EffectiveLengths, mode: Mode) -> Result<Mat> {
    if !context.iter().any(|v| v.is_finite()) {
        return Err(Error::Validation("context has no observed values".into()));
    }
    match mode {
        Mode::Mpi => mpi_extend(model, context, horizon, lengths.s_delta, lengths.t_eff),
        Mode::Autoregressive => autoregressive_extend(model, context, horizon, lengths.s_delta, lengths.t_eff),
    }
}

/// Appends `(j − 1)·t_eff` masked placeholders for patch `j` and decodes
/// each patch from its anchor, all in one causal pass: the encoder output
/// at a placeholder never depends on later placeholders.
pub fn mpi_extend(model: &Model, context: &[f64], horizon: usize, s_delta: f64, t_eff: usize) -> Result<Mat> {
    let patches = horizon.div_ceil(t_eff);
    let l = context.len();
    let mut values = context.to_vec();
    values.resize(l + (patches - 1) * t_eff, 0.0);
    let missing: Vec<bool> = values.iter().enumerate().map(|(t, v)| t >= l || !v.is_finite()).collect();
    let enc = model.encode_channel(&values, &missing, s_delta)?;
    let k = model.config.quantiles();
    let mut out = Mat::zeros(horizon, k);
    for j in 0..patches {
        let anchor = l - 1 + j * t_eff;
        let q = model.decode_at(&enc, anchor, s_delta, t_eff)?;
        for step in 0..t_eff {
            let row = j * t_eff + step;
            if row < horizon {
                out.row_mut(row).copy_from_slice(q.row(step));
            }
        }
    }
    Ok(out)
}

/// Decodes one patch, appends its median as observed data, and repeats.
/// The context keeps its original length by dropping the oldest steps.
pub fn autoregressive_extend(model: &Model, context: &[f64], horizon: usize, s_delta: f64, t_eff: usize) -> Result<Mat> {
    let k = model.config.quantiles();
    let med = model.config.median_index();
    let l = context.len();
    let mut values = context.to_vec();
    let mut out = Mat::zeros(horizon, k);
    let mut row = 0;
    while row < horizon {
        let window = &values[values.len() - l..];
        let missing: Vec<bool> = window.iter().map(|v| !v.is_finite()).collect();
        let enc = model.encode_channel(window, &missing, s_delta)?;
        let q = model.decode_at(&enc, l - 1, s_delta, t_eff)?;
        for step in 0..t_eff {
            if row + step < horizon {
                out.row_mut(row + step).copy_from_slice(q.row(step));
            }
            values.push(q.get(step, med));
        }
        row += t_eff;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        Model::init(ModelConfig {
            num_layers: 2,
            state_size: 4,
            hidden_size: 6,
            mlp_size: 8,
            context_length: 48,
            min_context: 4,
            t_base: 6,
            basis_n: 5,
            quantile_levels: vec![0.1, 0.5, 0.9],
            init_seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn wave(n: usize) -> Vec<f64> {
        (0..n).map(|t| 5.0 + (t as f64 * 0.3).sin() + 0.01 * t as f64).collect()
    }

    #[test]
    fn scale_and_lengths() {
        assert_eq!(scale_factor(24.0).unwrap(), 1.0);
        assert_eq!(scale_factor(12.0).unwrap(), 2.0);
        assert!(scale_factor(0.0).is_err());
        let m = tiny();
        let e = effective_lengths(&m, &TaskSpec::new(8.0, 10)).unwrap();
        assert_eq!((e.s_delta, e.context, e.t_eff), (3.0, 16, 2));
        // Finer sampling would need more context than the budget allows.
        let e = effective_lengths(&m, &TaskSpec::new(48.0, 10)).unwrap();
        assert_eq!((e.context, e.t_eff), (48, 12));
        let mut t = TaskSpec::new(8.0, 10);
        t.scale_override = Some(1.0);
        assert_eq!(effective_lengths(&m, &t).unwrap().t_eff, 6);
    }

    /// Each MPI patch recomputed with its own encoder pass over a context
    /// extended by exactly `(j−1)·t_eff` placeholders.
    #[test]
    fn mpi_single_pass_matches_separate_passes() {
        let m = tiny();
        let ctx = wave(30);
        let (s, t_eff, horizon) = (1.0, 6, 20);
        let fast = mpi_extend(&m, &ctx, horizon, s, t_eff).unwrap();
        for j in 0..4 {
            let mut v = ctx.clone();
            v.resize(30 + j * t_eff, 0.0);
            let miss: Vec<bool> = (0..v.len()).map(|t| t >= 30).collect();
            let enc = m.encode_channel(&v, &miss, s).unwrap();
            let q = m.decode_at(&enc, v.len() - 1, s, t_eff).unwrap();
            for step in 0..t_eff {
                let r = j * t_eff + step;
                if r < horizon {
                    for c in 0..3 {
                        assert!((fast.get(r, c) - q.get(step, c)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn first_patch_agrees_across_modes_and_quantiles_are_sorted() {
        let m = tiny();
        let hist = Mat::from_vec(40, 1, wave(40)).unwrap();
        let task = TaskSpec::new(24.0, 15);
        let a = forecast(&m, &hist, &task, Mode::Mpi).unwrap();
        let b = forecast(&m, &hist, &task, Mode::Autoregressive).unwrap();
        assert_eq!(a.horizon(), 15);
        for t in 0..6 {
            assert_eq!(a.channels[0].row(t), b.channels[0].row(t));
        }
        for f in [&a, &b] {
            for t in 0..15 {
                let r = f.channels[0].row(t);
                assert!(r.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn channels_are_independent() {
        let m = tiny();
        let x = wave(40);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v).collect();
        let mut both = Mat::zeros(40, 2);
        for t in 0..40 {
            both.row_mut(t).copy_from_slice(&[x[t], y[t]]);
        }
        let task = TaskSpec::new(24.0, 8);
        let f = forecast(&m, &both, &task, Mode::Mpi).unwrap();
        let single = forecast(&m, &Mat::from_vec(40, 1, y).unwrap(), &task, Mode::Mpi).unwrap();
        assert_eq!(f.channels[1], single.channels[0]);
    }

    #[test]
    fn missing_values_are_masked_not_rejected() {
        let m = tiny();
        let mut x = wave(40);
        x[10] = f64::NAN;
        x[39] = f64::NAN;
        let f = forecast(&m, &Mat::from_vec(40, 1, x).unwrap(), &TaskSpec::new(24.0, 5), Mode::Mpi).unwrap();
        assert!(f.channels[0].is_finite());
        let all_nan = Mat::filled(10, 1, f64::NAN);
        assert!(forecast(&m, &all_nan, &TaskSpec::new(24.0, 5), Mode::Mpi).is_err());
    }
}
