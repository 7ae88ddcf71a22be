use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use flowstate::checkpoint::{Checkpoint, TrainingState};
use flowstate::data::{generate_synthetic, load_dataset, save_long, CsvFormat, Manifest, Synthetic, TaskEntry, TimeSeries};
use flowstate::eval::{build_tasks, evaluate as run_evaluation, resample_eval as run_resample, Forecaster};
use flowstate::forecast::{forecast as run_forecast, Forecast, Mode, TaskSpec};
use flowstate::gradcheck::{run_gradcheck, Fault};
use flowstate::model::{Model, ModelConfig};
use flowstate::tensor::Mat;
use flowstate::train::{write_log_csv, AdamState, Trainer};

use crate::config::{DataConfig, RunConfig};
use crate::output::Outputs;
use crate::{EvaluateArgs, ForecastArgs, GenerateArgs, GradcheckArgs, ResampleArgs, TrainArgs, UsageError};

/// `None` means detect from the header.
pub fn parse_format(s: &str) -> Result<Option<CsvFormat>, UsageError> {
    match s {
        "auto" => Ok(None),
        other => other.parse().map(Some).map_err(|e: flowstate::Error| UsageError(e.to_string())),
    }
}

/// Long files have `id` and `value` columns; anything else is wide.
fn detect_format(path: &Path) -> Result<CsvFormat> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot read `{}`", path.display()))?;
    let headers = rdr.headers()?;
    let has = |name: &str| headers.iter().any(|h| h.trim() == name);
    Ok(if has("id") && has("value") { CsvFormat::CsvLong } else { CsvFormat::CsvWide })
}

fn load_manifest(path: Option<&Path>) -> Result<Option<Manifest>> {
    path.map(|p| Manifest::load(p).map_err(|e| UsageError(format!("manifest `{}`: {e}", p.display()))))
        .transpose()
        .map_err(Into::into)
}

fn load_series(path: &Path, format: &str, manifest: Option<&Manifest>) -> Result<Vec<TimeSeries>> {
    let format = match parse_format(format)? {
        Some(f) => f,
        None => detect_format(path)?,
    };
    let series = load_dataset(path, format, manifest)?;
    if series.is_empty() {
        bail!("`{}` contains no series", path.display());
    }
    Ok(series)
}

fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint `{}`", path.display()))?;
    Ok(ck.to_model()?)
}

fn write_args<T: serde::Serialize>(out: &mut Outputs, command: &str, args: &T) -> Result<()> {
    std::fs::write(out.file(&format!("{command}.args.json")), serde_json::to_string_pretty(args)?)?;
    Ok(())
}

fn io_csv(e: csv::Error) -> anyhow::Error {
    anyhow!(e)
}

fn training_series(data: &DataConfig) -> Result<Vec<Vec<f64>>> {
    if let Some(kind) = &data.synthetic {
        return (0..data.count as u64)
            .map(|i| Ok(generate_synthetic(kind, data.synthetic_seed + i, data.length)?.channel(0)))
            .collect();
    }
    let path = data.path.as_deref().expect("validated");
    let manifest = load_manifest(data.manifest.as_deref())?;
    let series = load_series(path, &data.format, manifest.as_ref())?;
    // Only the history part of each split is used for training.
    Ok(series.iter().flat_map(|s| (0..s.channels()).map(|c| s.channel(c)[..s.split].to_vec())).collect())
}

pub fn train(out_dir: &Path, a: &TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose().context("cannot load resume checkpoint")?;
    if let Some(ck) = &resume {
        let st = ck.training.as_ref().ok_or_else(|| UsageError("checkpoint has no optimizer state to resume".into()))?;
        run.model = ck.config.clone();
        run.train = st.config.clone();
    }
    if let Some(d) = &a.data {
        run.data.path = Some(d.clone());
        run.data.synthetic = None;
    }
    if let Some(steps) = a.steps {
        if resume.is_some() && steps != run.train.steps {
            log::warn!("changing the step count on resume changes the learning-rate schedule");
        }
        run.train.steps = steps;
    }
    if let Some(seed) = a.seed {
        run.train.seed = seed;
        if resume.is_none() {
            run.model.init_seed = seed;
        }
    }
    run.validate()?;
    let series = training_series(&run.data)?;

    let mut out = Outputs::new(out_dir)?;
    std::fs::write(out.file("config.resolved.toml"), run.to_toml())?;
    let (model, optimizer) = match resume {
        Some(ck) => (ck.to_model()?, ck.training.expect("checked above").optimizer),
        None => {
            let model = Model::init(run.model.clone())?;
            let opt = AdamState::new(&model.params.shapes());
            (model, opt)
        }
    };
    let resuming = a.resume.is_some();
    let mut trainer = Trainer::resume(model, run.train.clone(), optimizer, series)?;
    let ckpt = out.file("checkpoint.json");
    let log_path = out.file("train_log.csv");
    let mut append = resuming && log_path.exists();
    let until = a.stop_after.unwrap_or(run.train.steps).min(run.train.steps);
    log::info!("{} parameters; training to step {until} of {}", trainer.model.params.num_parameters(), run.train.steps);

    let save = |t: &Trainer| -> Result<()> {
        let state = TrainingState { config: t.config.clone(), optimizer: t.optimizer.clone() };
        Checkpoint::from_model(&t.model, Some(state)).save(&ckpt)?;
        Ok(())
    };
    let mut last = None;
    while trainer.step_count() < until {
        let next = match a.checkpoint_every {
            0 => until,
            n => ((trainer.step_count() / n + 1) * n).min(until),
        };
        let logs = trainer.run_to(next, |l| {
            log::info!("step {} loss {:.5} grad_norm {:.4} lr {:.2e}", l.step, l.loss, l.grad_norm, l.lr)
        })?;
        write_log_csv(&log_path, &logs, append)?;
        append = true;
        save(&trainer)?;
        last = logs.last().cloned();
    }
    if last.is_none() {
        save(&trainer)?;
        if !log_path.exists() {
            write_log_csv(&log_path, &[], false)?;
        }
    }
    match last {
        Some(l) => println!("trained to step {} (loss {:.5}); checkpoint {}", l.step, l.loss, ckpt.display()),
        None => println!("no steps run; checkpoint {}", ckpt.display()),
    }
    out.commit();
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Timestamp of forecast step `k` after `split`: taken from the series when
/// it extends that far, otherwise extrapolated from the last two numeric
/// stamps, otherwise `last+n`.
fn future_stamp(s: &TimeSeries, k: usize) -> String {
    let t = s.split + k;
    if t < s.timestamps.len() {
        return s.timestamps[t].clone();
    }
    let last = s.timestamps.len() - 1;
    let ahead = t - last;
    let parsed = |i: usize| s.timestamps.get(i).and_then(|v| v.trim().parse::<f64>().ok());
    match (last.checked_sub(1).and_then(parsed), parsed(last)) {
        (Some(prev), Some(end)) => {
            let v = end + ahead as f64 * (end - prev);
            if v.fract() == 0.0 && v.abs() < 1e15 {
                format!("{}", v as i64)
            } else {
                v.to_string()
            }
        }
        _ => format!("{}+{ahead}", s.timestamps[last]),
    }
}

fn write_forecast(path: &Path, s: &TimeSeries, season: f64, f: &Forecast) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("# id: {}\n", s.id));
    text.push_str(&format!("# mode: {}\n", f.mode));
    text.push_str(&format!("# seasonality: {season}\n"));
    text.push_str(&format!("# s_delta: {}\n", f.lengths.s_delta));
    text.push_str(&format!("# t_eff: {}\n", f.lengths.t_eff));
    text.push_str(&format!("# context: {}\n", f.lengths.context));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["timestamp".to_string(), "channel".to_string()];
    header.extend(f.levels.iter().map(|l| format!("q{l}")));
    w.write_record(&header).map_err(io_csv)?;
    for (c, q) in f.channels.iter().enumerate() {
        for k in 0..q.rows {
            let mut row = vec![future_stamp(s, k), c.to_string()];
            row.extend(q.row(k).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(io_csv)?;
        }
    }
    text.push_str(std::str::from_utf8(&w.into_inner().map_err(|e| anyhow!("{e}"))?)?);
    std::fs::write(path, text)?;
    Ok(())
}

pub fn forecast(out_dir: &Path, a: &ForecastArgs) -> Result<()> {
    let manifest = load_manifest(a.data.manifest.as_deref())?;
    let model = load_model(&a.checkpoint)?;
    let series = load_series(&a.series, &a.data.format, manifest.as_ref())?;
    let mut specs = Vec::new();
    for s in &series {
        let entry = manifest.as_ref().and_then(|m| m.task(&s.id));
        let season = a.data.seasonality.or(entry.map(|e| e.seasonality)).ok_or_else(|| {
            UsageError(format!("no seasonality for `{}`: pass --seasonality or list it in a --manifest", s.id))
        })?;
        let horizon = a.data.horizon.or(entry.map(|e| e.horizon)).ok_or_else(|| {
            UsageError(format!("no horizon for `{}`: pass --horizon or list it in a --manifest", s.id))
        })?;
        let spec = TaskSpec {
            seasonality: season,
            horizon,
            scale_override: a.run.scale_override,
            context_budget: a.run.context_budget,
        };
        spec.s_delta().map_err(|e| UsageError(e.to_string()))?;
        if horizon == 0 {
            return Err(UsageError("--horizon must be positive".into()).into());
        }
        specs.push(spec);
    }

    let mut out = Outputs::new(out_dir)?;
    write_args(&mut out, "forecast", a)?;
    let mode: Mode = a.run.mode.into();
    for (s, spec) in series.iter().zip(&specs) {
        let mut hist = Mat::zeros(s.split, s.channels());
        hist.data.copy_from_slice(&s.values.data[..s.split * s.channels()]);
        let f = run_forecast(&model, &hist, spec, mode).with_context(|| format!("forecasting `{}`", s.id))?;
        let path = out.file(&format!("forecast_{}.csv", sanitize(&s.id)));
        write_forecast(&path, s, spec.seasonality, &f)?;
        println!("{}: {} steps x {} channels -> {}", s.id, f.horizon(), f.channels.len(), path.display());
    }
    out.commit();
    Ok(())
}

pub fn evaluate(out_dir: &Path, a: &EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(a.data.manifest.as_deref())?;
    let model = a.checkpoint.as_deref().filter(|_| !a.naive).map(load_model).transpose()?;
    let series = load_series(&a.dataset, &a.data.format, manifest.as_ref())?;
    let tasks = build_tasks(&series, manifest.as_ref(), a.data.seasonality, a.data.horizon)?;
    let forecaster = match &model {
        Some(model) => Forecaster::Model {
            model,
            mode: a.run.mode.into(),
            scale_override: a.run.scale_override,
            context_budget: a.run.context_budget,
        },
        None => Forecaster::SeasonalNaive { levels: ModelConfig::default().quantile_levels },
    };
    let report = run_evaluation(&forecaster, &tasks);

    let mut out = Outputs::new(out_dir)?;
    write_args(&mut out, "evaluate", a)?;
    for name in ["report.json", "report.csv", "aggregate.csv"] {
        out.file(name);
    }
    report.write(out_dir)?;
    let failed = report.per_task.iter().filter(|t| t.error.is_some()).count();
    for t in report.per_task.iter().filter(|t| t.error.is_some()) {
        log::warn!("task `{}` failed: {}", t.task_id, t.error.as_deref().unwrap_or_default());
    }
    println!(
        "{} tasks ({failed} failed); geometric mean MASE {:.4}, WQL {:.4}, CRPS {:.4} over {} tasks",
        tasks.len(),
        report.mase.value,
        report.wql.value,
        report.crps.value,
        report.mase.used
    );
    // The report is complete even when every task failed, so keep it.
    out.commit();
    if failed == tasks.len() {
        bail!("all {failed} tasks failed");
    }
    Ok(())
}

fn parse_factors(s: &str) -> Result<Vec<usize>, UsageError> {
    let bad = || UsageError(format!("invalid --factors `{s}`: use `a..b` or a comma list of positive integers"));
    let factors: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (lo..=hi).collect()
    } else {
        s.split(',').map(|f| f.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if factors.is_empty() || factors.contains(&0) {
        return Err(bad());
    }
    Ok(factors)
}

pub fn resample_eval(out_dir: &Path, a: &ResampleArgs) -> Result<()> {
    let factors = parse_factors(&a.factors)?;
    if a.target == 0 {
        return Err(UsageError("--target must be positive".into()).into());
    }
    let manifest = load_manifest(a.manifest.as_deref())?;
    let model = load_model(&a.checkpoint)?;
    let series = load_series(&a.series, &a.format, manifest.as_ref())?;
    let s = match &a.id {
        Some(id) => series.iter().find(|s| &s.id == id).ok_or_else(|| UsageError(format!("no series `{id}`")))?,
        None => &series[0],
    };
    if a.channel >= s.channels() {
        return Err(UsageError(format!("`{}` has {} channels", s.id, s.channels())).into());
    }
    let season = a
        .seasonality
        .or(manifest.as_ref().and_then(|m| m.task(&s.id)).map(|e| e.seasonality))
        .ok_or_else(|| UsageError(format!("no seasonality for `{}`: pass --seasonality or a --manifest", s.id)))?;
    let rows = run_resample(&model, &s.channel(a.channel), season, &factors, a.target, a.mode.into(), !a.no_scale_adjust)?;
    if rows.is_empty() {
        bail!("every factor left too little history for {} target steps", a.target);
    }

    let mut out = Outputs::new(out_dir)?;
    write_args(&mut out, "resample_eval", a)?;
    let path = out.file("resample.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io_csv)?;
    for r in &rows {
        w.serialize(r).map_err(io_csv)?;
        println!("factor {:>3}  s_delta {:>7.3}  MAE {:.5}", r.factor, r.s_delta, r.mae);
    }
    w.flush()?;
    out.commit();
    Ok(())
}

pub fn generate(out_dir: &Path, a: &GenerateArgs) -> Result<()> {
    if a.count == 0 || a.length == 0 {
        return Err(UsageError("--count and --length must be positive".into()).into());
    }
    let kind: Synthetic = match &a.params {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read `{}`", p.display()))?;
            toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
        None => match a.kind {
            crate::KindArg::Sinmix => Synthetic::Sinmix(Default::default()),
            crate::KindArg::GpKernel => Synthetic::GpKernel(Default::default()),
            crate::KindArg::TrendNoise => Synthetic::TrendNoise(Default::default()),
        },
    };
    let series: Vec<TimeSeries> = (0..a.count as u64)
        .map(|i| generate_synthetic(&kind, a.seed + i, a.length))
        .collect::<flowstate::Result<_>>()?;

    let mut out = Outputs::new(out_dir)?;
    write_args(&mut out, "generate", a)?;
    std::fs::write(out.file("generator.toml"), toml::to_string(&kind)?)?;
    let path = out.file("synthetic.csv");
    save_long(&path, &series)?;
    if let (Some(seasonality), Some(horizon)) = (a.seasonality, a.horizon) {
        let tasks = series
            .iter()
            .map(|s| TaskEntry { id: s.id.clone(), seasonality, horizon, interval: 1.0, split: None })
            .collect();
        Manifest { tasks }.save(&out.file("manifest.json"))?;
    }
    println!("{} series x {} steps -> {}", series.len(), a.length, path.display());
    out.commit();
    Ok(())
}

pub fn gradcheck(out_dir: &Path, a: &GradcheckArgs) -> Result<()> {
    if !(a.tolerance > 0.0) {
        return Err(UsageError("--tolerance must be positive".into()).into());
    }
    let fault = a.inject_fault.as_ref().map(|p| Fault { primitive: p.clone(), magnitude: a.fault_magnitude });
    let report = run_gradcheck(a.seed, a.tolerance, fault.as_ref())?;
    if let Some(f) = &fault {
        if !report.checks.iter().any(|c| c.name == f.primitive) {
            let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
            return Err(UsageError(format!("unknown primitive `{}`; one of {}", f.primitive, names.join(", "))).into());
        }
    }

    let mut out = Outputs::new(out_dir)?;
    write_args(&mut out, "gradcheck", a)?;
    let mut w = csv::Writer::from_path(out.file("gradcheck.csv")).map_err(io_csv)?;
    for c in &report.checks {
        w.serialize(c).map_err(io_csv)?;
        println!("{:<16} {:>5} entries  max rel err {:.3e}  {}", c.name, c.entries, c.max_rel_err, if c.passed { "ok" } else { "FAIL" });
    }
    w.flush()?;
    out.commit();
    if !report.passed() {
        bail!("gradient check failed: max relative error {:.3e} > {:.1e}", report.max_rel_err(), a.tolerance);
    }
    println!("all {} checks within {:.1e}", report.checks.len(), a.tolerance);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_lists() {
        assert_eq!(parse_factors("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_factors("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_factors("2, 5,7").unwrap(), vec![2, 5, 7]);
        assert!(parse_factors("0..3").is_err());
        assert!(parse_factors("a").is_err());
    }

    #[test]
    fn stamps_extend_numeric_and_label_others() {
        let mut s = TimeSeries::univariate("x", vec![1.0, 2.0, 3.0], 1.0).unwrap();
        s.timestamps = vec!["10".into(), "20".into(), "30".into()];
        assert_eq!(future_stamp(&s, 0), "40");
        assert_eq!(future_stamp(&s, 2), "60");
        s.split = 1;
        assert_eq!(future_stamp(&s, 0), "20");
        s.timestamps = vec!["a".into(), "b".into(), "c".into()];
        assert_eq!(future_stamp(&s, 3), "c+2");
    }
}
