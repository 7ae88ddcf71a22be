//! Central finite-difference checks of every tape primitive and of the
//! full training loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PinballTarget, Tape, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig, ParamVars};
use crate::tensor::Mat;
use crate::train::{anchor_range, record_item_loss, TrainItem};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const MODEL_FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
/// Floor on the relative-error denominator, so entries whose true
/// gradient is exactly zero are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Deliberate corruption of one analytic gradient, used to show that the
/// checker can fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub primitive: String,
    /// Relative error added to the first gradient entry.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<PrimitiveCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Compares analytic and numeric gradients of `Σ w ⊙ build(inputs)` with
/// respect to every input entry.
fn check_op(name: &str, inputs: Vec<Mat>, build: &Build, fault: Option<&Fault>) -> Result<(usize, f64)> {
    let probe = |tape: &mut Tape, vars: &[Var], w: &Option<Arc<Vec<f64>>>| -> Result<(Var, Arc<Vec<f64>>)> {
        let out = build(tape, vars)?;
        let n = tape.value(out)?.len();
        let w = match w {
            Some(w) => w.clone(),
            None => Arc::new((0..n).map(|i| 0.5 + (i as f64 * 0.37).sin()).collect()),
        };
        Ok((tape.weighted_sum(out, w.clone())?, w))
    };
    let eval = |inputs: &[Mat], w: &Arc<Vec<f64>>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
        let (loss, _) = probe(&mut tape, &vars, &Some(w.clone()))?;
        Ok(tape.value(loss)?.data[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
    let (loss, w) = probe(&mut tape, &vars, &None)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, m)| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; m.len()]))
        .collect();
    if let Some(f) = fault.filter(|f| f.primitive == name) {
        if let Some(g) = analytic.iter_mut().find(|g| !g.is_empty()) {
            g[0] += f.magnitude * g[0].abs().max(1.0);
        }
    }
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut work = inputs.clone();
    for (i, m) in inputs.iter().enumerate() {
        for j in 0..m.len() {
            let x = m.data[j];
            let h = FD_STEP * x.abs().max(1.0);
            work[i].data[j] = x + h;
            let up = eval(&work, &w)?;
            work[i].data[j] = x - h;
            let down = eval(&work, &w)?;
            work[i].data[j] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], numeric));
            entries += 1;
        }
    }
    Ok((entries, worst))
}

fn randm(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat { rows, cols, data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect() }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Mat>, Box<Build>)> {
    let (r, i, o, p) = (3, 4, 5, 3);
    let phi = Arc::new(randm(rng, 4, 3, 1.0));
    let levels = vec![0.1, 0.5, 0.9];
    // Targets are placed well away from the predictions so no loss term
    // sits within a finite-difference step of its kink.
    let target = Arc::new(PinballTarget {
        target: Mat::from_vec(2, 3, vec![4.0, -4.0, 5.0, -5.0, 6.0, f64::NAN]).expect("shape"),
        mu: vec![0.2, -0.1],
        sigma: vec![1.3, 0.7],
        levels: levels.clone(),
    });
    let phi2 = phi.clone();
    vec![
        (
            "linear",
            vec![randm(rng, r, i, 1.0), randm(rng, o, i, 1.0), randm(rng, 1, o, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], Some(v[2]))),
        ),
        ("add", vec![randm(rng, r, i, 1.0), randm(rng, r, i, 1.0)], Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]))),
        (
            "mul_row",
            vec![randm(rng, r, i, 1.0), randm(rng, 1, i, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| t.mul_row(v[0], v[1])),
        ),
        ("gelu", vec![randm(rng, r, i, 3.0)], Box::new(|t: &mut Tape, v: &[Var]| t.gelu(v[0]))),
        (
            "layer_norm",
            vec![randm(rng, r, o, 2.0), randm(rng, 1, o, 1.0), randm(rng, 1, o, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| t.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "discretize",
            vec![randm(rng, 1, p, 1.0), randm(rng, 1, p, 3.0), randm(rng, 1, p, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| t.discretize(v[0], v[1], v[2], 1.7)),
        ),
        (
            "diag_scan",
            {
                let mut disc = randm(rng, 1, 4 * p, 0.7);
                for d in &mut disc.data[..2 * p] {
                    *d *= 0.9;
                }
                vec![disc, randm(rng, 6, p, 1.0), randm(rng, 6, p, 1.0)]
            },
            Box::new(|t: &mut Tape, v: &[Var]| t.diag_scan(v[0], v[1], v[2])),
        ),
        (
            "complex_readout",
            vec![randm(rng, r, 2 * p, 1.0), randm(rng, o, p, 1.0), randm(rng, o, p, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| t.complex_readout(v[0], v[1], v[2])),
        ),
        (
            "concat_cols",
            vec![randm(rng, r, 2, 1.0), randm(rng, r, 3, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| t.concat_cols(v[0], v[1])),
        ),
        ("slice_rows", vec![randm(rng, 5, 3, 1.0)], Box::new(|t: &mut Tape, v: &[Var]| t.slice_rows(v[0], 1, 4))),
        (
            "basis_expand",
            vec![randm(rng, 2, 9, 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.basis_expand(v[0], phi.clone(), 3)),
        ),
        (
            "denorm_pinball",
            vec![randm(rng, 2, 9, 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.denorm_pinball(v[0], target.clone())),
        ),
        (
            "weighted_sum",
            vec![randm(rng, 2, 3, 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let w = Arc::new(phi2.data[..6].to_vec());
                t.weighted_sum(v[0], w)
            }),
        ),
    ]
}

/// Small model for the end-to-end check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        state_size: 4,
        hidden_size: 8,
        mlp_size: 8,
        context_length: 16,
        min_context: 4,
        t_base: 5,
        basis_n: 4,
        quantile_levels: vec![0.1, 0.5, 0.9],
        ..ModelConfig::default()
    }
}

/// Checks the full training loss with respect to `per_tensor` entries of
/// every parameter tensor.
fn check_model(seed: u64, per_tensor: usize, fault: Option<&Fault>) -> Result<(usize, f64)> {
    let config = ModelConfig { init_seed: seed, ..gradcheck_model_config() };
    let model = Model::init(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let len = config.context_length + config.t_base - 1;
    let window: Vec<f64> = (0..len).map(|t| 2.0 + (t as f64 * 0.5).sin() + rng.random_range(-0.3..0.3)).collect();
    let mut item = TrainItem::new(window, config.context_length)?;
    for m in &mut item.missing[9..14] {
        *m = true;
    }
    let anchors = anchor_range(item.context, config.min_context, true)?;
    let phi = Arc::new(model.basis_for(1.0, config.t_base)?);
    let loss_of = |params: &crate::model::ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, params);
        let loss = record_item_loss(&mut tape, &pv, &config, phi.clone(), &item, anchors.clone())?;
        Ok(tape.value(loss)?.data[0])
    };
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, &model.params);
    let loss = record_item_loss(&mut tape, &pv, &config, phi.clone(), &item, anchors.clone())?;
    let mut grads = tape.backward(loss)?.param_grads(&model.params.shapes());
    if let Some(f) = fault.filter(|f| f.primitive == "model_loss") {
        let g = &mut grads[0].data[0];
        *g += f.magnitude * g.abs().max(1.0);
    }
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut work = model.params.clone();
    for (slot, g) in grads.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= per_tensor {
            (0..g.len()).collect()
        } else {
            let mut v = vec![0];
            v.extend((1..per_tensor).map(|_| rng.random_range(0..g.len())));
            v
        };
        for j in picks {
            let x = work.tensors_mut()[slot].data[j];
            // A faulty gradient disagrees at every step size, while
            // round-off (small steps) and loss kinks (large steps) each
            // spoil only one end of the range.
            let mut best = f64::INFINITY;
            for step in MODEL_FD_STEPS {
                let h = step * x.abs().max(1.0);
                work.tensors_mut()[slot].data[j] = x + h;
                let up = loss_of(&work)?;
                work.tensors_mut()[slot].data[j] = x - h;
                let down = loss_of(&work)?;
                work.tensors_mut()[slot].data[j] = x;
                best = best.min(rel_err(g.data[j], (up - down) / (2.0 * h)));
            }
            worst = worst.max(best);
            entries += 1;
        }
    }
    Ok((entries, worst))
}

/// Runs every primitive check and the end-to-end loss check.
pub fn run_gradcheck(seed: u64, tolerance: f64, fault: Option<&Fault>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (name, inputs, build) in primitive_cases(&mut rng) {
        let (entries, worst) = check_op(name, inputs, build.as_ref(), fault)?;
        checks.push(PrimitiveCheck { name: name.into(), entries, max_rel_err: worst, passed: worst <= tolerance });
    }
    let (entries, worst) = check_model(seed, 6, fault)?;
    checks.push(PrimitiveCheck { name: "model_loss".into(), entries, max_rel_err: worst, passed: worst <= tolerance });
    Ok(GradcheckReport { tolerance, checks })
}
