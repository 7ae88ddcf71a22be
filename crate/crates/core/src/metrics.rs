//! Seasonal-naive baseline, MASE, WQL and geometric-mean aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::pinball;
use crate::error::{dim, Error, Result};

pub const DENOM_EPS: f64 = 1e-12;

/// Repeats the last season of `history`.
pub fn seasonal_naive(history: &[f64], m: usize, horizon: usize) -> Vec<f64> {
    if history.is_empty() || horizon == 0 {
        return Vec::new();
    }
    let m = if m == 0 || history.len() < m {
        log::warn!("history of {} steps is shorter than season {m}; using last value", history.len());
        1
    } else {
        m
    };
    let len = history.len();
    (0..horizon).map(|k| history[len - m + (k % m)]).collect()
}

/// A metric value with a flag for a vanishing denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}

/// Mean absolute error scaled by the in-sample seasonal-naive error.
pub fn mase(pred: &[f64], target: &[f64], insample: &[f64], m: usize) -> Result<Metric> {
    if target.is_empty() {
        return Err(Error::Validation("MASE needs at least one target".into()));
    }
    if pred.len() != target.len() {
        return Err(dim(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let m = m.max(1);
    if insample.len() <= m {
        return Err(Error::Validation(format!("in-sample length {} must exceed season {m}", insample.len())));
    }
    let num = mean_abs(pred.iter().zip(target).map(|(p, t)| t - p));
    let denom = mean_abs((m..insample.len()).map(|t| insample[t] - insample[t - m]));
    Ok(Metric { value: num / denom.max(DENOM_EPS), degenerate: denom < DENOM_EPS })
}

fn mean_abs(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        if v.is_finite() {
            s += v.abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Weighted quantile loss `2 Σ ρ_q(y − ŷ_q) / (K Σ |y|)`. `pred` is
/// row-major `T × K`.
pub fn wql(pred: &[f64], target: &[f64], levels: &[f64]) -> Result<Metric> {
    let k = levels.len();
    if k == 0 || pred.len() != target.len() * k {
        return Err(dim(format!("{} quantile values for {} targets × {k} levels", pred.len(), target.len())));
    }
    crate::model::validate_levels(levels)?;
    let mut loss = 0.0;
    for (t, &y) in target.iter().enumerate() {
        for (q, &level) in levels.iter().enumerate() {
            loss += pinball(level, y - pred[t * k + q]);
        }
    }
    let scale: f64 = target.iter().map(|y| y.abs()).sum();
    Ok(Metric { value: 2.0 * loss / (k as f64 * scale.max(DENOM_EPS)), degenerate: scale < DENOM_EPS })
}

/// Mean pinball loss over a `T × K` prediction.
pub fn pinball_loss(pred: &[f64], target: &[f64], levels: &[f64]) -> Result<f64> {
    let k = levels.len();
    if k == 0 || pred.len() != target.len() * k {
        return Err(dim(format!("{} quantile values for {} targets × {k} levels", pred.len(), target.len())));
    }
    if levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(Error::Domain(format!("quantile levels must lie in (0, 1): {levels:?}")));
    }
    let mut loss = 0.0;
    for (t, &y) in target.iter().enumerate() {
        for (q, &level) in levels.iter().enumerate() {
            loss += pinball(level, y - pred[t * k + q]);
        }
    }
    Ok(loss / pred.len().max(1) as f64)
}

/// Geometric mean over positive finite values; others are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub value: f64,
    pub used: usize,
    pub excluded: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let good: Vec<f64> = values.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    let excluded = values.len() - good.len();
    if excluded > 0 {
        log::warn!("{excluded} non-positive or non-finite values excluded from the geometric mean");
    }
    let value = if good.is_empty() {
        f64::NAN
    } else {
        (good.iter().map(|v| v.ln()).sum::<f64>() / good.len() as f64).exp()
    };
    Aggregate { value, used: good.len(), excluded }
}

/// Per-task scores against the seasonal-naive baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub mase_model: f64,
    pub mase_naive: f64,
    pub wql_model: f64,
    pub wql_naive: f64,
    pub mase_ratio: f64,
    pub wql_ratio: f64,
    /// Same number as `wql_ratio`; CRPS is reported as its quantile
    /// approximation.
    pub crps_ratio: f64,
    pub degenerate: bool,
    pub error: Option<String>,
}

impl TaskReport {
    pub fn failed(task_id: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            mase_model: f64::NAN,
            mase_naive: f64::NAN,
            wql_model: f64::NAN,
            wql_naive: f64::NAN,
            mase_ratio: f64::NAN,
            wql_ratio: f64::NAN,
            crps_ratio: f64::NAN,
            degenerate: false,
            error: Some(error.into()),
        }
    }
}

/// Scores one univariate task. `model_q` is `T × K`.
pub fn score_task(
    task_id: &str,
    model_q: &[f64],
    target: &[f64],
    insample: &[f64],
    m: usize,
    levels: &[f64],
) -> Result<TaskReport> {
    let k = levels.len();
    let median = crate::model::median_index(levels);
    let model_point: Vec<f64> = model_q.chunks(k).map(|r| r[median]).collect();
    let naive = seasonal_naive(insample, m, target.len());
    let naive_q: Vec<f64> = naive.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();

    let mm = mase(&model_point, target, insample, m)?;
    let mn = mase(&naive, target, insample, m)?;
    let wm = wql(model_q, target, levels)?;
    let wn = wql(&naive_q, target, levels)?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
    let wql_ratio = ratio(wm.value, wn.value);
    Ok(TaskReport {
        task_id: task_id.to_string(),
        mase_model: mm.value,
        mase_naive: mn.value,
        wql_model: wm.value,
        wql_naive: wn.value,
        mase_ratio: ratio(mm.value, mn.value),
        wql_ratio,
        crps_ratio: wql_ratio,
        degenerate: mm.degenerate || wm.degenerate || mn.value <= 0.0 || wn.value <= 0.0,
        error: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskReport>,
    pub mase: Aggregate,
    pub wql: Aggregate,
    pub crps: Aggregate,
}

impl EvalReport {
    /// Sorts tasks by id and aggregates the usable ones.
    pub fn from_tasks(mut per_task: Vec<TaskReport>) -> Self {
        per_task.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        let usable: Vec<&TaskReport> = per_task.iter().filter(|t| t.error.is_none() && !t.degenerate).collect();
        let mase = aggregate(&usable.iter().map(|t| t.mase_ratio).collect::<Vec<_>>());
        let wql = aggregate(&usable.iter().map(|t| t.wql_ratio).collect::<Vec<_>>());
        let crps = wql.clone();
        Self { per_task, mase, wql, crps }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "task_id", "mase_model", "mase_naive", "wql_model", "wql_naive", "mase_ratio", "wql_ratio",
            "crps_ratio", "degenerate", "error",
        ])
        .map_err(io)?;
        for t in &self.per_task {
            w.write_record([
                t.task_id.clone(),
                t.mase_model.to_string(),
                t.mase_naive.to_string(),
                t.wql_model.to_string(),
                t.wql_naive.to_string(),
                t.mase_ratio.to_string(),
                t.wql_ratio.to_string(),
                t.crps_ratio.to_string(),
                t.degenerate.to_string(),
                t.error.clone().unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        let agg = |name: &str, a: &Aggregate| vec![format!("geomean_{name}"), a.value.to_string()];
        let mut a = csv::Writer::from_path(dir.join("aggregate.csv")).map_err(io)?;
        a.write_record(["metric", "value"]).map_err(io)?;
        a.write_record(agg("mase", &self.mase)).map_err(io)?;
        a.write_record(agg("wql", &self.wql)).map_err(io)?;
        a.write_record(agg("crps", &self.crps)).map_err(io)?;
        w.flush()?;
        a.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seasonal_naive_examples() {
        assert_eq!(seasonal_naive(&[1.0, 2.0, 3.0, 4.0], 2, 4), vec![3.0, 4.0, 3.0, 4.0]);
        assert_eq!(seasonal_naive(&[1.0, 5.0], 1, 3), vec![5.0; 3]);
        assert!(seasonal_naive(&[1.0, 2.0], 2, 0).is_empty());
        assert_eq!(seasonal_naive(&[1.0, 2.0], 5, 2), vec![2.0, 2.0]);
    }

    #[test]
    fn mase_examples() {
        let m = mase(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 1.0, 3.0], 1).unwrap();
        assert_eq!(m.value, 0.0);
        let d = mase(&[2.0, 2.0], &[1.0, 2.0], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2).unwrap();
        assert!(d.degenerate);
        let v = mase(&[2.0, 2.0], &[1.0, 2.0], &[1.0, 2.0, 1.0, 2.0, 1.0, 3.0], 2).unwrap();
        assert!(!v.degenerate);
        assert!((v.value - 2.0).abs() < 1e-12);
        assert!(mase(&[], &[], &[1.0, 2.0, 3.0], 1).is_err());
    }

    #[test]
    fn wql_examples() {
        let w = wql(&[1.0], &[2.0], &[0.5]).unwrap();
        assert!((w.value - 0.5).abs() < 1e-12);
        let perfect = wql(&[2.0, 2.0, 3.0, 3.0], &[2.0, 3.0], &[0.1, 0.9]).unwrap();
        assert_eq!(perfect.value, 0.0);
        assert!(wql(&[0.0], &[0.0], &[0.5]).unwrap().degenerate);
    }

    #[test]
    fn pinball_examples() {
        assert!((pinball_loss(&[1.0], &[2.0], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((pinball_loss(&[1.0], &[2.0], &[0.9]).unwrap() - 0.9).abs() < 1e-15);
        assert!((pinball_loss(&[2.0], &[1.0], &[0.9]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(pinball_loss(&[3.0, 3.0], &[3.0], &[0.2, 0.7]).unwrap(), 0.0);
        assert!(matches!(pinball_loss(&[1.0], &[1.0], &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn aggregate_examples() {
        assert!((aggregate(&[1.0, 4.0]).value - 2.0).abs() < 1e-12);
        assert_eq!(aggregate(&[1.0, 1.0, 1.0]).value, 1.0);
        assert!((aggregate(&[0.5, 0.5, 2.0]).value - 0.5f64.cbrt()).abs() < 1e-12);
        let a = aggregate(&[2.0, -1.0, 0.0]);
        assert_eq!((a.value, a.used, a.excluded), (2.0, 1, 2));
    }

    proptest! {
        #[test]
        fn median_pinball_is_half_abs(e in -1e3f64..1e3) {
            prop_assert!((pinball(0.5, e) - 0.5 * e.abs()).abs() < 1e-12);
        }

        #[test]
        fn wql_is_scale_invariant(y in prop::collection::vec(0.1f64..10.0, 1..20), s in 0.1f64..100.0) {
            let levels = [0.1, 0.5, 0.9];
            let pred: Vec<f64> = y.iter().flat_map(|v| [v * 0.8, v * 1.1, v * 1.3]).collect();
            let a = wql(&pred, &y, &levels).unwrap().value;
            let ys: Vec<f64> = y.iter().map(|v| v * s).collect();
            let ps: Vec<f64> = pred.iter().map(|v| v * s).collect();
            let b = wql(&ps, &ys, &levels).unwrap().value;
            prop_assert!((a - b).abs() < 1e-10 * a.max(1.0));
        }

        #[test]
        fn aggregate_is_permutation_invariant(mut v in prop::collection::vec(0.01f64..10.0, 1..10)) {
            let a = aggregate(&v).value;
            v.reverse();
            prop_assert!((a - aggregate(&v).value).abs() < 1e-12 * a);
            prop_assert!((aggregate(&v[..1]).value - v[0]).abs() < 1e-12 * v[0]);
        }

        #[test]
        fn naive_self_evaluation_is_one(seed in 0u64..500) {
            let hist: Vec<f64> = (0..50).map(|t| ((t as u64 * 7 + seed) as f64 * 0.37).sin() * 3.0 + 5.0).collect();
            let target: Vec<f64> = (0..12).map(|t| ((t as u64 * 11 + seed) as f64 * 0.91).cos() + 5.0).collect();
            let levels = [0.1, 0.5, 0.9];
            let naive = seasonal_naive(&hist, 4, 12);
            let q: Vec<f64> = naive.iter().flat_map(|&v| [v, v, v]).collect();
            let r = score_task("t", &q, &target, &hist, 4, &levels).unwrap();
            prop_assert_eq!(r.mase_ratio, 1.0);
            prop_assert_eq!(r.wql_ratio, 1.0);
        }
    }
}
