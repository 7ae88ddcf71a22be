//! Held-out evaluation against the seasonal-naive baseline, and the
//! sampling-rate robustness sweep.

use serde::{Deserialize, Serialize};

use crate::data::{Manifest, TimeSeries};
use crate::error::{Error, Result};
use crate::forecast::{forecast, Mode, TaskSpec};
use crate::metrics::{score_task, seasonal_naive, EvalReport, TaskReport};
use crate::model::Model;
use crate::par;
use crate::tensor::Mat;

/// One univariate forecasting problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: String,
    pub history: Vec<f64>,
    pub target: Vec<f64>,
    pub seasonality: f64,
}

impl EvalTask {
    pub fn horizon(&self) -> usize {
        self.target.len()
    }

    /// Seasonal-naive period in steps.
    pub fn naive_period(&self) -> usize {
        (self.seasonality.round() as usize).max(1)
    }
}

/// Splits each series at its boundary into history and the next `horizon`
/// steps. Multichannel series yield one task per channel, with ids
/// `id/c{channel}`. Explicit `seasonality` and `horizon` take precedence
/// over manifest entries; the split comes from the manifest when present.
pub fn build_tasks(
    series: &[TimeSeries],
    manifest: Option<&Manifest>,
    seasonality: Option<f64>,
    horizon: Option<usize>,
) -> Result<Vec<EvalTask>> {
    let mut tasks = Vec::new();
    for s in series {
        let entry = manifest.and_then(|m| m.task(&s.id));
        let season = seasonality.or(entry.map(|e| e.seasonality)).ok_or_else(|| {
            Error::Config(format!("no seasonality for `{}`: pass one or list the series in a manifest", s.id))
        })?;
        let h = horizon.or(entry.map(|e| e.horizon)).ok_or_else(|| Error::Config(format!("no horizon for `{}`", s.id)))?;
        if h == 0 {
            return Err(Error::Validation(format!("`{}`: horizon must be positive", s.id)));
        }
        let split = match entry.and_then(|e| e.split) {
            Some(sp) => sp,
            None if s.split < s.len() => s.split,
            None => s.len().checked_sub(h).ok_or_else(|| {
                Error::Validation(format!("`{}` has {} steps, fewer than the horizon {h}", s.id, s.len()))
            })?,
        };
        if split == 0 || split + h > s.len() {
            return Err(Error::Validation(format!(
                "`{}`: split {split} with horizon {h} does not fit {} steps",
                s.id,
                s.len()
            )));
        }
        for c in 0..s.channels() {
            let x = s.channel(c);
            let id = if s.channels() == 1 { s.id.clone() } else { format!("{}/c{c}", s.id) };
            tasks.push(EvalTask {
                id,
                history: x[..split].to_vec(),
                target: x[split..split + h].to_vec(),
                seasonality: season,
            });
        }
    }
    Ok(tasks)
}

/// Anything that can produce a `horizon × K` quantile forecast.
pub enum Forecaster<'a> {
    Model { model: &'a Model, mode: Mode, scale_override: Option<f64>, context_budget: Option<usize> },
    /// Repeats the last season at every quantile level.
    SeasonalNaive { levels: Vec<f64> },
}

impl Forecaster<'_> {
    pub fn levels(&self) -> &[f64] {
        match self {
            Forecaster::Model { model, .. } => &model.config.quantile_levels,
            Forecaster::SeasonalNaive { levels } => levels,
        }
    }

    pub fn predict(&self, task: &EvalTask) -> Result<Mat> {
        match self {
            Forecaster::Model { model, mode, scale_override, context_budget } => {
                let spec = TaskSpec {
                    seasonality: task.seasonality,
                    horizon: task.horizon(),
                    scale_override: *scale_override,
                    context_budget: *context_budget,
                };
                let hist = Mat::from_vec(task.history.len(), 1, task.history.clone())?;
                let mut f = forecast(model, &hist, &spec, *mode)?;
                Ok(f.channels.remove(0))
            }
            Forecaster::SeasonalNaive { levels } => {
                let k = levels.len();
                let point = seasonal_naive(&task.history, task.naive_period(), task.horizon());
                let data = point.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
                Mat::from_vec(task.horizon(), k, data)
            }
        }
    }
}

/// Scores every task; failures are recorded per task, not propagated.
pub fn evaluate(forecaster: &Forecaster<'_>, tasks: &[EvalTask]) -> EvalReport {
    let per_task = par::map_collect(tasks, |task| {
        let run = || -> Result<TaskReport> {
            let q = forecaster.predict(task)?;
            score_task(&task.id, &q.data, &task.target, &task.history, task.naive_period(), forecaster.levels())
        };
        run().unwrap_or_else(|e| TaskReport::failed(task.id.clone(), e.to_string()))
    });
    EvalReport::from_tasks(per_task)
}

/// One row of the sampling-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleRow {
    pub factor: usize,
    pub seasonality: f64,
    pub s_delta: f64,
    pub horizon: usize,
    pub mae: f64,
}

/// Subsamples `series` (univariate) by each factor, forecasts the last
/// `target` steps of every version with the median, and reports MAE.
/// With `scale_adjust` off, every version is forecast with `s_Δ = 1`.
/// Factors that leave too little history are skipped with a warning.
pub fn resample_eval(
    model: &Model,
    series: &[f64],
    seasonality: f64,
    factors: &[usize],
    target: usize,
    mode: Mode,
    scale_adjust: bool,
) -> Result<Vec<ResampleRow>> {
    if target == 0 {
        return Err(Error::Validation("target length must be positive".into()));
    }
    let mut rows = Vec::new();
    for &k in factors {
        if k == 0 {
            return Err(Error::Validation("subsampling factor must be positive".into()));
        }
        let sub: Vec<f64> = series.iter().step_by(k).copied().collect();
        if sub.len() < target + model.config.min_context {
            log::warn!("factor {k}: {} steps leave no room for {target} targets; skipped", sub.len());
            continue;
        }
        let split = sub.len() - target;
        let season = seasonality / k as f64;
        let mut spec = TaskSpec::new(season, target);
        if !scale_adjust {
            spec.scale_override = Some(1.0);
        }
        let s_delta = spec.s_delta()?;
        let hist = Mat::from_vec(split, 1, sub[..split].to_vec())?;
        let f = forecast(model, &hist, &spec, mode)?;
        let med = f.median(0);
        let mae = med.iter().zip(&sub[split..]).map(|(p, y)| (p - y).abs()).sum::<f64>() / target as f64;
        rows.push(ResampleRow { factor: k, seasonality: season, s_delta, horizon: target, mae });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskEntry;
    use crate::model::ModelConfig;

    fn series(id: &str, n: usize) -> TimeSeries {
        let v = (0..n).map(|t| 10.0 + (t as f64 * std::f64::consts::PI / 6.0).sin() + 0.05 * t as f64).collect();
        TimeSeries::univariate(id, v, 1.0).unwrap()
    }

    #[test]
    fn naive_adapter_normalizes_to_one() {
        let tasks = build_tasks(&[series("a", 80), series("b", 90)], None, Some(12.0), Some(12)).unwrap();
        let report = evaluate(&Forecaster::SeasonalNaive { levels: vec![0.1, 0.5, 0.9] }, &tasks);
        for t in &report.per_task {
            assert_eq!(t.mase_ratio, 1.0);
            assert_eq!(t.wql_ratio, 1.0);
        }
        assert_eq!(report.mase.value, 1.0);
    }

    #[test]
    fn manifest_overrides_and_channel_split() {
        let mut two = Mat::zeros(50, 2);
        for t in 0..50 {
            two.row_mut(t).copy_from_slice(&[t as f64, 2.0 * t as f64 + 1.0]);
        }
        let s = TimeSeries::new("m", two, 1.0).unwrap();
        let manifest =
            Manifest { tasks: vec![TaskEntry { id: "m".into(), seasonality: 7.0, horizon: 5, interval: 1.0, split: Some(40) }] };
        let tasks = build_tasks(&[s], Some(&manifest), None, None).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[1].id, "m/c1");
        assert_eq!(tasks[1].history.len(), 40);
        assert_eq!(tasks[1].target, vec![81.0, 83.0, 85.0, 87.0, 89.0]);
        assert!(build_tasks(&[series("x", 30)], None, None, Some(5)).is_err());
    }

    #[test]
    fn failures_are_per_task() {
        let model = Model::init(ModelConfig {
            num_layers: 1,
            state_size: 4,
            hidden_size: 6,
            mlp_size: 6,
            context_length: 32,
            min_context: 4,
            t_base: 6,
            basis_n: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut tasks = build_tasks(&[series("ok", 60)], None, Some(12.0), Some(6)).unwrap();
        let mut bad = tasks[0].clone();
        bad.id = "bad".into();
        bad.history = vec![f64::NAN; 10];
        tasks.push(bad);
        let f = Forecaster::Model { model: &model, mode: Mode::Mpi, scale_override: None, context_budget: None };
        let report = evaluate(&f, &tasks);
        assert!(report.per_task[0].error.is_some());
        assert!(report.per_task[1].error.is_none());
        assert_eq!(report.mase.used, 1);

        let x: Vec<f64> = (0..400).map(|t| (t as f64 * 0.2).sin()).collect();
        let rows = resample_eval(&model, &x, 24.0, &[1, 2, 3, 50], 20, Mode::Mpi, true).unwrap();
        assert_eq!(rows.iter().map(|r| r.factor).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(rows[1].s_delta, 2.0);
        let plain = resample_eval(&model, &x, 24.0, &[3], 20, Mode::Mpi, false).unwrap();
        assert_eq!(plain[0].s_delta, 1.0);
    }
}
