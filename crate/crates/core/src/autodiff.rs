//! Reverse-mode gradient tape over the model's primitive operations.
//!
//! Nodes are appended in execution order, so every input precedes its
//! consumers and a single reverse sweep accumulates all adjoints. Each node
//! stores its forward value; ops that need extra forward state for their
//! backward rule (layer norm, the discretization) keep it in the op.
//!
//! Complex quantities use split planes: a complex `L × P` value is stored
//! as an `L × 2P` matrix whose rows are `[re_0..re_P, im_0..im_P]`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::basis::dot;
use crate::error::{dim, Error, Result};
use crate::scan::{scan_diag, ComplexVec};
use crate::tensor::Mat;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Below this magnitude the discretization uses the `λ → 0` limit.
pub const LAMBDA_LIMIT: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    MulRow { x: Var, d: Var },
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Discretize { lre: Var, lim: Var, logd: Var, delta: Vec<f64> },
    DiagScan { disc: Var, u_re: Var, u_im: Var },
    ComplexReadout { s: Var, c_re: Var, c_im: Var },
    ConcatCols(Var, Var),
    SliceRows { x: Var, start: usize },
    BasisExpand { coeffs: Var, phi: Arc<Mat>, quantiles: usize },
    DenormPinball { pred: Var, target: Arc<PinballTarget> },
    WeightedSum { x: Var, weights: Arc<Vec<f64>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::MulRow { .. } => "mul_row",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Discretize { .. } => "discretize",
            Op::DiagScan { .. } => "diag_scan",
            Op::ComplexReadout { .. } => "complex_readout",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::BasisExpand { .. } => "basis_expand",
            Op::DenormPinball { .. } => "denorm_pinball",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

/// Targets and de-normalization statistics for the fused quantile loss.
/// `target` is `A × T` (one row per anchor); `mu`, `sigma` have `A`
/// entries; `levels` has `K` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PinballTarget {
    pub target: Mat,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub levels: Vec<f64>,
}

impl PinballTarget {
    /// Number of loss terms: finite targets times quantile levels, at
    /// least 1. Non-finite targets are unobserved and contribute nothing.
    pub fn count(&self) -> usize {
        let finite = self.target.data.iter().filter(|v| v.is_finite()).count();
        (finite * self.levels.len()).max(1)
    }
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.adjoints.get(v.idx).and_then(|a| a.as_deref())
    }

    /// Gradients of parameter leaves, indexed by parameter slot. Slots whose
    /// leaf was never recorded or does not influence the loss are zero.
    pub fn param_grads(&self, shapes: &[(usize, usize)]) -> Vec<Mat> {
        let mut out: Vec<Mat> = shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
        for &(slot, node) in &self.params {
            if let (Some(dst), Some(Some(src))) = (out.get_mut(slot), self.adjoints.get(node)) {
                for (d, s) in dst.data.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Mat> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Structure(format!("node {} is not recorded on this tape", v.idx)));
        }
        Ok(&self.nodes[v.idx].value)
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { idx: self.nodes.len() - 1, tape: self.id }
    }

    pub fn value(&self, v: Var) -> Result<&Mat> {
        self.check(v)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Records a trainable input occupying parameter slot `slot`.
    pub fn param(&mut self, slot: usize, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: Some(slot) })
    }

    /// `x · wᵀ (+ b)`: `x` is `R × I`, `w` is `O × I`, `b` is `1 × O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xm, wm) = (self.check(x)?, self.check(w)?);
        if xm.cols != wm.cols {
            return Err(dim(format!("linear: input {:?} vs weight {:?}", xm.shape(), wm.shape())));
        }
        let mut out = Mat::zeros(xm.rows, wm.rows);
        for r in 0..xm.rows {
            let xr = xm.row(r);
            let orow = out.row_mut(r);
            for (o, v) in orow.iter_mut().enumerate() {
                *v = dot(xr, wm.row(o));
            }
        }
        if let Some(b) = b {
            let bm = self.check(b)?;
            if bm.len() != wm.rows {
                return Err(dim(format!("linear: bias has {} entries for {} outputs", bm.len(), wm.rows)));
            }
            for r in 0..out.rows {
                for (v, bb) in out.row_mut(r).iter_mut().zip(&bm.data) {
                    *v += bb;
                }
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.check(a)?, self.check(b)?);
        if am.shape() != bm.shape() {
            return Err(dim(format!("add: {:?} vs {:?}", am.shape(), bm.shape())));
        }
        let data = am.data.iter().zip(&bm.data).map(|(x, y)| x + y).collect();
        let out = Mat { rows: am.rows, cols: am.cols, data };
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product of every row of `x` with the row vector `d`.
    pub fn mul_row(&mut self, x: Var, d: Var) -> Result<Var> {
        let (xm, dm) = (self.check(x)?, self.check(d)?);
        if dm.len() != xm.cols {
            return Err(dim(format!("mul_row: {} factors for {} columns", dm.len(), xm.cols)));
        }
        let mut out = xm.clone();
        for r in 0..out.rows {
            for (v, f) in out.row_mut(r).iter_mut().zip(&dm.data) {
                *v *= f;
            }
        }
        Ok(self.push(out, Op::MulRow { x, d }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xm = self.check(x)?;
        let data = xm.data.iter().map(|&v| gelu(v)).collect();
        let out = Mat { rows: xm.rows, cols: xm.cols, data };
        Ok(self.push(out, Op::Gelu(x)))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1 × C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xm, gm, bm) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let c = xm.cols;
        if gm.len() != c || bm.len() != c {
            return Err(dim("layer_norm: affine parameters do not match width"));
        }
        let mut xhat = vec![0.0; xm.len()];
        let mut rstd = vec![0.0; xm.rows];
        let mut out = Mat::zeros(xm.rows, c);
        for r in 0..xm.rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out.data[r * c + j] = xh * gm.data[j] + bm.data[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Zero-order-hold discretization of a diagonal continuous system.
    ///
    /// Inputs are `1 × P` rows: `lre` parameterizes `Re λ = −exp(lre)`,
    /// `lim` is `Im λ`, and `logd` is the per-state log step size. With
    /// `Δ̄ = s_delta · exp(logd)` the output is the `1 × 4P` row
    /// `[Re ā, Im ā, Re g, Im g]` where `ā = exp(λΔ̄)` and
    /// `g = (ā − 1)/λ`, so that the discretized input map is `g ⊙ B`.
    pub fn discretize(&mut self, lre: Var, lim: Var, logd: Var, s_delta: f64) -> Result<Var> {
        if !(s_delta > 0.0) || !s_delta.is_finite() {
            return Err(Error::Domain(format!("s_delta must be positive, got {s_delta}")));
        }
        let (rm, im, dm) = (self.check(lre)?, self.check(lim)?, self.check(logd)?);
        let p = rm.len();
        if im.len() != p || dm.len() != p {
            return Err(dim("discretize: eigenvalue and step rows differ in length"));
        }
        let mut out = Mat::zeros(1, 4 * p);
        let mut delta = vec![0.0; p];
        for i in 0..p {
            let lam = (-rm.data[i].exp(), im.data[i]);
            let d = s_delta * dm.data[i].exp();
            delta[i] = d;
            let (a, g) = zoh(lam, d);
            out.data[i] = a.0;
            out.data[p + i] = a.1;
            out.data[2 * p + i] = g.0;
            out.data[3 * p + i] = g.1;
        }
        Ok(self.push(out, Op::Discretize { lre, lim, logd, delta }))
    }

    /// Runs `s_t = ā ⊙ s_{t−1} + g ⊙ u_t` from `s_0 = 0`. `disc` is the
    /// output of [`Tape::discretize`]; `u_re`, `u_im` are `L × P`. The
    /// result is the complex `L × 2P` state sequence.
    pub fn diag_scan(&mut self, disc: Var, u_re: Var, u_im: Var) -> Result<Var> {
        let (dm, ur, ui) = (self.check(disc)?, self.check(u_re)?, self.check(u_im)?);
        let p = dm.len() / 4;
        if dm.len() != 4 * p || ur.cols != p || ui.shape() != ur.shape() {
            return Err(dim(format!(
                "diag_scan: disc {:?}, drive {:?}/{:?}",
                dm.shape(),
                ur.shape(),
                ui.shape()
            )));
        }
        let l = ur.rows;
        let a = ComplexVec { re: dm.data[..p].to_vec(), im: dm.data[p..2 * p].to_vec() };
        let (g_re, g_im) = (&dm.data[2 * p..3 * p], &dm.data[3 * p..]);
        let mut b_re = vec![0.0; l * p];
        let mut b_im = vec![0.0; l * p];
        for t in 0..l {
            for i in 0..p {
                let (xr, xi) = (ur.data[t * p + i], ui.data[t * p + i]);
                b_re[t * p + i] = g_re[i] * xr - g_im[i] * xi;
                b_im[t * p + i] = g_re[i] * xi + g_im[i] * xr;
            }
        }
        let (s_re, s_im) = scan_diag(&a, &b_re, &b_im)?;
        let out = Mat { rows: l, cols: 2 * p, data: interleave_planes(&s_re, &s_im, l, p) };
        Ok(self.push(out, Op::DiagScan { disc, u_re, u_im }))
    }

    /// `Re(C s_t)` for a complex state sequence `s` (`L × 2P`) and
    /// `C = c_re + i c_im` (`H × P`).
    pub fn complex_readout(&mut self, s: Var, c_re: Var, c_im: Var) -> Result<Var> {
        let (sm, cr, ci) = (self.check(s)?, self.check(c_re)?, self.check(c_im)?);
        let p = cr.cols;
        if sm.cols != 2 * p || ci.shape() != cr.shape() {
            return Err(dim(format!("complex_readout: state {:?}, C {:?}", sm.shape(), cr.shape())));
        }
        let mut out = Mat::zeros(sm.rows, cr.rows);
        for t in 0..sm.rows {
            let row = sm.row(t);
            let (sr, si) = row.split_at(p);
            for o in 0..cr.rows {
                out.data[t * cr.rows + o] = dot(cr.row(o), sr) - dot(ci.row(o), si);
            }
        }
        Ok(self.push(out, Op::ComplexReadout { s, c_re, c_im }))
    }

    /// Side-by-side concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.check(a)?, self.check(b)?);
        if am.rows != bm.rows {
            return Err(dim("concat_cols: row counts differ"));
        }
        let mut out = Mat::zeros(am.rows, am.cols + bm.cols);
        for r in 0..am.rows {
            out.row_mut(r)[..am.cols].copy_from_slice(am.row(r));
            out.row_mut(r)[am.cols..].copy_from_slice(bm.row(r));
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xm = self.check(x)?;
        if start > end || end > xm.rows {
            return Err(dim(format!("slice_rows {start}..{end} of {} rows", xm.rows)));
        }
        let data = xm.data[start * xm.cols..end * xm.cols].to_vec();
        let out = Mat { rows: end - start, cols: xm.cols, data };
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Evaluates per-row basis expansions. `coeffs` is `A × (K·n)`
    /// (quantile-major), `phi` is the constant `T × n` basis matrix. The
    /// result is `A × (T·K)` with entry `[a, t·K + q]`.
    pub fn basis_expand(&mut self, coeffs: Var, phi: Arc<Mat>, quantiles: usize) -> Result<Var> {
        let cm = self.check(coeffs)?;
        let (t_len, n) = phi.shape();
        let k = quantiles;
        if cm.cols != k * n {
            return Err(dim(format!("basis_expand: {} coefficients for {k}×{n}", cm.cols)));
        }
        let mut out = Mat::zeros(cm.rows, t_len * k);
        for a in 0..cm.rows {
            let crow = cm.row(a);
            let orow = out.row_mut(a);
            for t in 0..t_len {
                let ph = phi.row(t);
                for q in 0..k {
                    orow[t * k + q] = dot(&crow[q * n..(q + 1) * n], ph);
                }
            }
        }
        Ok(self.push(out, Op::BasisExpand { coeffs, phi, quantiles }))
    }

    /// Mean pinball loss of `pred · σ_a + μ_a` against the targets, over all
    /// anchors `a`, horizon steps and quantile levels. `pred` is
    /// `A × (T·K)` as produced by [`Tape::basis_expand`].
    pub fn denorm_pinball(&mut self, pred: Var, target: Arc<PinballTarget>) -> Result<Var> {
        let pm = self.check(pred)?;
        let (a_len, t_len, k) = (target.target.rows, target.target.cols, target.levels.len());
        if pm.rows != a_len || pm.cols != t_len * k || target.mu.len() != a_len || target.sigma.len() != a_len {
            return Err(dim(format!(
                "denorm_pinball: prediction {:?} vs {a_len} anchors × {t_len} steps × {k} levels",
                pm.shape()
            )));
        }
        let mut total = 0.0;
        for a in 0..a_len {
            let (mu, sigma) = (target.mu[a], target.sigma[a]);
            let prow = pm.row(a);
            for t in 0..t_len {
                let y = target.target.get(a, t);
                if !y.is_finite() {
                    continue;
                }
                for (q, &level) in target.levels.iter().enumerate() {
                    total += pinball(level, y - (prow[t * k + q] * sigma + mu));
                }
            }
        }
        let n = target.count() as f64;
        Ok(self.push(Mat::filled(1, 1, total / n), Op::DenormPinball { pred, target }))
    }

    /// `Σ weights ⊙ x`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Arc<Vec<f64>>) -> Result<Var> {
        let xm = self.check(x)?;
        if weights.len() != xm.len() {
            return Err(dim("weighted_sum: weight count differs from input size"));
        }
        let v = dot(&xm.data, &weights);
        Ok(self.push(Mat::filled(1, 1, v), Op::WeightedSum { x, weights }))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lm = self.check(loss)?;
        if lm.len() != 1 {
            return Err(Error::Structure(format!("loss must be scalar, got {:?}", lm.shape())));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        adj[loss.idx] = Some(vec![1.0]);
        let mut params = Vec::new();
        for idx in (0..=loss.idx).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            for input in inputs(&node.op) {
                if input.tape != self.id || input.idx >= idx {
                    return Err(Error::Structure(format!(
                        "{} node {idx} references node {} out of order",
                        node.op.name(),
                        input.idx
                    )));
                }
            }
            self.backprop_node(idx, &g, &mut adj)?;
            if let Op::Leaf { param: Some(slot) } = node.op {
                params.push((slot, idx));
            }
            adj[idx] = Some(g);
        }
        Ok(Gradients { tape: self.id, adjoints: adj, params })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.idx].value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Linear { x, w, b } => {
                let (xm, wm) = (val(*x), val(*w));
                let (rows, inp, outp) = (xm.rows, xm.cols, wm.rows);
                {
                    let gx = slot(adj, *x, rows * inp);
                    for r in 0..rows {
                        let grow = &g[r * outp..(r + 1) * outp];
                        let gxr = &mut gx[r * inp..(r + 1) * inp];
                        for (o, &go) in grow.iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, wm.row(o), gxr);
                            }
                        }
                    }
                }
                {
                    let gw = slot(adj, *w, outp * inp);
                    for r in 0..rows {
                        let xr = xm.row(r);
                        for o in 0..outp {
                            let go = g[r * outp + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut gw[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = slot(adj, *b, outp);
                    for r in 0..rows {
                        for o in 0..outp {
                            gb[o] += g[r * outp + o];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let n = g.len();
                axpy(1.0, g, slot(adj, *a, n));
                axpy(1.0, g, slot(adj, *b, n));
            }
            Op::MulRow { x, d } => {
                let (xm, dm) = (val(*x), val(*d));
                let c = xm.cols;
                {
                    let gx = slot(adj, *x, xm.len());
                    for r in 0..xm.rows {
                        for j in 0..c {
                            gx[r * c + j] += g[r * c + j] * dm.data[j];
                        }
                    }
                }
                let gd = slot(adj, *d, c);
                for r in 0..xm.rows {
                    for j in 0..c {
                        gd[j] += g[r * c + j] * xm.data[r * c + j];
                    }
                }
            }
            Op::Gelu(x) => {
                let xm = val(*x);
                let gx = slot(adj, *x, xm.len());
                for (i, &v) in xm.data.iter().enumerate() {
                    gx[i] += g[i] * gelu_grad(v);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = val(*gamma);
                let c = gm.len();
                let rows = rstd.len();
                {
                    let gg = slot(adj, *gamma, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                {
                    let gb = slot(adj, *beta, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                let gx = slot(adj, *x, rows * c);
                let cf = c as f64;
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let dxh = g[r * c + j] * gm.data[j];
                        sum_d += dxh;
                        sum_dx += dxh * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let dxh = g[r * c + j] * gm.data[j];
                        gx[r * c + j] +=
                            rstd[r] * (dxh - sum_d / cf - xhat[r * c + j] * sum_dx / cf);
                    }
                }
            }
            Op::Discretize { lre, lim, logd, delta } => {
                let (rm, im) = (val(*lre), val(*lim));
                let p = rm.len();
                let out = &node.value.data;
                let mut g_lre = vec![0.0; p];
                let mut g_lim = vec![0.0; p];
                let mut g_logd = vec![0.0; p];
                for i in 0..p {
                    let lam = (-rm.data[i].exp(), im.data[i]);
                    let d = delta[i];
                    let a = (out[i], out[p + i]);
                    let ga = (g[i], g[p + i]);
                    let gg = (g[2 * p + i], g[3 * p + i]);
                    // derivatives of ā and g w.r.t. λ (holomorphic) and Δ̄ (real)
                    let da_dlam = cscale(a, d);
                    let da_dd = cmul(lam, a);
                    let (dg_dlam, dg_dd) = if cabs(lam) < LAMBDA_LIMIT {
                        ((d * d / 2.0, 0.0), (1.0 + lam.0 * d, lam.1 * d))
                    } else {
                        let num = csub(cscale(cmul(a, lam), d), (a.0 - 1.0, a.1));
                        (cdiv(num, cmul(lam, lam)), a)
                    };
                    let g_lam = cadd(cmul(conj(da_dlam), ga), cmul(conj(dg_dlam), gg));
                    let g_d = cmul(conj(da_dd), ga).0 + cmul(conj(dg_dd), gg).0;
                    g_lre[i] = g_lam.0 * lam.0;
                    g_lim[i] = g_lam.1;
                    g_logd[i] = g_d * d;
                }
                axpy(1.0, &g_lre, slot(adj, *lre, p));
                axpy(1.0, &g_lim, slot(adj, *lim, p));
                axpy(1.0, &g_logd, slot(adj, *logd, p));
            }
            Op::DiagScan { disc, u_re, u_im } => {
                let (dm, ur, ui) = (val(*disc), val(*u_re), val(*u_im));
                let p = dm.len() / 4;
                let l = ur.rows;
                let a = (&dm.data[..p], &dm.data[p..2 * p]);
                let gcoef = (&dm.data[2 * p..3 * p], &dm.data[3 * p..]);
                let s = &node.value.data;
                // adjoint recurrence λ_t = G_t + conj(ā) λ_{t+1}, run as a
                // forward scan over the reversed sequence
                let mut rev_re = vec![0.0; l * p];
                let mut rev_im = vec![0.0; l * p];
                for t in 0..l {
                    let src = (l - 1 - t) * 2 * p;
                    rev_re[t * p..(t + 1) * p].copy_from_slice(&g[src..src + p]);
                    rev_im[t * p..(t + 1) * p].copy_from_slice(&g[src + p..src + 2 * p]);
                }
                let a_conj = ComplexVec { re: a.0.to_vec(), im: a.1.iter().map(|v| -v).collect() };
                let (lam_rev_re, lam_rev_im) = scan_diag(&a_conj, &rev_re, &rev_im)?;
                let lam = |t: usize, i: usize| {
                    let k = (l - 1 - t) * p + i;
                    (lam_rev_re[k], lam_rev_im[k])
                };
                let mut g_disc = vec![0.0; 4 * p];
                {
                    let mut gu_re = vec![0.0; l * p];
                    let mut gu_im = vec![0.0; l * p];
                    for t in 0..l {
                        for i in 0..p {
                            let lt = lam(t, i);
                            let gc = (gcoef.0[i], gcoef.1[i]);
                            let gu = cmul(conj(gc), lt);
                            gu_re[t * p + i] = gu.0;
                            gu_im[t * p + i] = gu.1;
                            let u = (ur.data[t * p + i], ui.data[t * p + i]);
                            let dg = cmul(conj(u), lt);
                            g_disc[2 * p + i] += dg.0;
                            g_disc[3 * p + i] += dg.1;
                            if t > 0 {
                                let prev = (s[(t - 1) * 2 * p + i], s[(t - 1) * 2 * p + p + i]);
                                let da = cmul(conj(prev), lt);
                                g_disc[i] += da.0;
                                g_disc[p + i] += da.1;
                            }
                        }
                    }
                    axpy(1.0, &gu_re, slot(adj, *u_re, l * p));
                    axpy(1.0, &gu_im, slot(adj, *u_im, l * p));
                }
                axpy(1.0, &g_disc, slot(adj, *disc, 4 * p));
            }
            Op::ComplexReadout { s, c_re, c_im } => {
                let (sm, cr, ci) = (val(*s), val(*c_re), val(*c_im));
                let (h, p, l) = (cr.rows, cr.cols, sm.rows);
                {
                    let gs = slot(adj, *s, l * 2 * p);
                    for t in 0..l {
                        for o in 0..h {
                            let go = g[t * h + o];
                            if go != 0.0 {
                                let base = t * 2 * p;
                                axpy(go, cr.row(o), &mut gs[base..base + p]);
                                axpy(-go, ci.row(o), &mut gs[base + p..base + 2 * p]);
                            }
                        }
                    }
                }
                {
                    let gcr = slot(adj, *c_re, h * p);
                    for t in 0..l {
                        let row = sm.row(t);
                        for o in 0..h {
                            axpy(g[t * h + o], &row[..p], &mut gcr[o * p..(o + 1) * p]);
                        }
                    }
                }
                let gci = slot(adj, *c_im, h * p);
                for t in 0..l {
                    let row = sm.row(t);
                    for o in 0..h {
                        axpy(-g[t * h + o], &row[p..], &mut gci[o * p..(o + 1) * p]);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let (ca, cb) = (am.cols, bm.cols);
                let w = ca + cb;
                {
                    let ga = slot(adj, *a, am.len());
                    for r in 0..am.rows {
                        axpy(1.0, &g[r * w..r * w + ca], &mut ga[r * ca..(r + 1) * ca]);
                    }
                }
                let gb = slot(adj, *b, bm.len());
                for r in 0..bm.rows {
                    axpy(1.0, &g[r * w + ca..(r + 1) * w], &mut gb[r * cb..(r + 1) * cb]);
                }
            }
            Op::SliceRows { x, start } => {
                let xm = val(*x);
                let gx = slot(adj, *x, xm.len());
                let off = start * xm.cols;
                axpy(1.0, g, &mut gx[off..off + g.len()]);
            }
            Op::BasisExpand { coeffs, phi, quantiles } => {
                let cm = val(*coeffs);
                let (t_len, n) = phi.shape();
                let k = *quantiles;
                let gc = slot(adj, *coeffs, cm.len());
                for a in 0..cm.rows {
                    let grow = &g[a * t_len * k..(a + 1) * t_len * k];
                    let gcrow = &mut gc[a * k * n..(a + 1) * k * n];
                    for t in 0..t_len {
                        let ph = phi.row(t);
                        for q in 0..k {
                            let go = grow[t * k + q];
                            if go != 0.0 {
                                axpy(go, ph, &mut gcrow[q * n..(q + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::DenormPinball { pred, target } => {
                let pm = val(*pred);
                let (a_len, t_len, k) = (target.target.rows, target.target.cols, target.levels.len());
                let scale = g[0] / target.count() as f64;
                let gp = slot(adj, *pred, pm.len());
                for a in 0..a_len {
                    let (mu, sigma) = (target.mu[a], target.sigma[a]);
                    for t in 0..t_len {
                        let y = target.target.get(a, t);
                        if !y.is_finite() {
                            continue;
                        }
                        for (q, &level) in target.levels.iter().enumerate() {
                            let i = a * t_len * k + t * k + q;
                            let e = y - (pm.data[i] * sigma + mu);
                            gp[i] -= scale * sigma * pinball_slope(level, e);
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let gx = slot(adj, *x, weights.len());
                axpy(g[0], weights, gx);
            }
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Add(a, b) | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::MulRow { x, d } => vec![*x, *d],
        Op::Gelu(x) | Op::SliceRows { x, .. } | Op::WeightedSum { x, .. } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Discretize { lre, lim, logd, .. } => vec![*lre, *lim, *logd],
        Op::DiagScan { disc, u_re, u_im } => vec![*disc, *u_re, *u_im],
        Op::ComplexReadout { s, c_re, c_im } => vec![*s, *c_re, *c_im],
        Op::BasisExpand { coeffs, .. } => vec![*coeffs],
        Op::DenormPinball { pred, .. } => vec![*pred],
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.idx].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `ρ_q(e) = max(q·e, (q − 1)·e)` with `e = target − prediction`.
#[inline]
pub fn pinball(q: f64, e: f64) -> f64 {
    (q * e).max((q - 1.0) * e)
}

/// Subgradient of [`pinball`] in `e`; the kink takes the midpoint slope.
#[inline]
fn pinball_slope(q: f64, e: f64) -> f64 {
    if e > 0.0 {
        q
    } else if e < 0.0 {
        q - 1.0
    } else {
        q - 0.5
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `(exp(λΔ), (exp(λΔ) − 1)/λ)` with the `λ → 0` limit `(1, Δ)`.
pub fn zoh(lam: (f64, f64), delta: f64) -> ((f64, f64), (f64, f64)) {
    let mag = (lam.0 * delta).exp();
    let a = (mag * (lam.1 * delta).cos(), mag * (lam.1 * delta).sin());
    let g = if cabs(lam) < LAMBDA_LIMIT {
        (delta, 0.0)
    } else {
        // exp(x + iy) - 1 without cancellation for small |λΔ|.
        let (x, y) = (lam.0 * delta, lam.1 * delta);
        let half = (0.5 * y).sin();
        let am1 = (x.exp_m1() * y.cos() - 2.0 * half * half, a.1);
        cdiv(am1, lam)
    };
    (a, g)
}

fn interleave_planes(re: &[f64], im: &[f64], l: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * 2 * p];
    for t in 0..l {
        out[t * 2 * p..t * 2 * p + p].copy_from_slice(&re[t * p..(t + 1) * p]);
        out[t * 2 * p + p..(t + 1) * 2 * p].copy_from_slice(&im[t * p..(t + 1) * p]);
    }
    out
}

type C64 = (f64, f64);

#[inline]
fn cmul(a: C64, b: C64) -> C64 {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}
#[inline]
fn cadd(a: C64, b: C64) -> C64 {
    (a.0 + b.0, a.1 + b.1)
}
#[inline]
fn csub(a: C64, b: C64) -> C64 {
    (a.0 - b.0, a.1 - b.1)
}
#[inline]
fn cscale(a: C64, s: f64) -> C64 {
    (a.0 * s, a.1 * s)
}
#[inline]
fn conj(a: C64) -> C64 {
    (a.0, -a.1)
}
#[inline]
fn cabs(a: C64) -> f64 {
    a.0.hypot(a.1)
}
#[inline]
fn cdiv(a: C64, b: C64) -> C64 {
    let d = b.0 * b.0 + b.1 * b.1;
    ((a.0 * b.0 + a.1 * b.1) / d, (a.1 * b.0 - a.0 * b.1) / d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(0, Mat::row_vector(vec![1.5, -2.0, 0.25]));
        let w = Arc::new(vec![1.0; 3]);
        let sq = tape.mul_row(p, p).unwrap();
        let loss = tape.weighted_sum(sq, w).unwrap();
        let grads = tape.backward(loss).unwrap().param_grads(&[(1, 3)]);
        assert_eq!(grads[0].data, vec![3.0, -4.0, 0.5]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let p = tape.param(0, Mat::row_vector(vec![1.0, 2.0]));
        let _unused = tape.param(1, Mat::row_vector(vec![3.0]));
        let loss = tape.weighted_sum(p, Arc::new(vec![1.0, 1.0])).unwrap();
        let grads = tape.backward(loss).unwrap().param_grads(&[(1, 2), (1, 1)]);
        assert_eq!(grads[1].data, vec![0.0]);
    }

    #[test]
    fn foreign_and_non_scalar_nodes_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.constant(Mat::row_vector(vec![1.0, 2.0]));
        let y = b.constant(Mat::row_vector(vec![1.0, 2.0]));
        assert!(matches!(a.add(x, y), Err(Error::Structure(_))));
        assert!(matches!(a.backward(x), Err(Error::Structure(_))));
        assert!(matches!(a.backward(y), Err(Error::Structure(_))));
    }

    #[test]
    fn zoh_scalar_cases() {
        let (a, g) = zoh((-1.0, 0.0), std::f64::consts::LN_2);
        assert!((a.0 - 0.5).abs() < 1e-15 && a.1 == 0.0);
        assert!((g.0 - 0.5).abs() < 1e-15);
        let (a, g) = zoh((0.0, 0.0), 0.3);
        assert_eq!(a, (1.0, 0.0));
        assert_eq!(g, (0.3, 0.0));
    }
}
