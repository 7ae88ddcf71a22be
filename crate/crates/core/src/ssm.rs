//! S5 encoder: diagonal continuous-time state space layers with
//! HiPPO-LegS initialization, zero-order-hold discretization, and a
//! pre-norm residual MLP after every SSM block.

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{zoh, Tape, Var};
use crate::error::{dim, Error, Result};
use crate::scan::ComplexVec;
use crate::tensor::Mat;

pub const DELTA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1e-1;

/// Encoder shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub state_size: usize,
    pub hidden_size: usize,
    /// Width of the MLP hidden layer inside each S5 layer.
    pub mlp_size: usize,
    /// One value channel plus one observation-mask channel.
    pub input_channels: usize,
    pub context_length: usize,
    pub min_context: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.state_size == 0 || self.hidden_size == 0 || self.mlp_size == 0 || self.input_channels == 0 {
            return Err(Error::Config("state_size, hidden_size, mlp_size and input_channels must be positive".into()));
        }
        if self.min_context == 0 || self.min_context >= self.context_length {
            return Err(Error::Config(format!(
                "need 0 < min_context ({}) < context_length ({})",
                self.min_context, self.context_length
            )));
        }
        Ok(())
    }
}

/// Trainable parameters of one S5 layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S5LayerParams {
    /// `Re λ = −exp(lambda_re_raw)`, `1 × P`.
    pub lambda_re_raw: Mat,
    /// `Im λ`, `1 × P`.
    pub lambda_im: Mat,
    /// Input map, `P × H`, split planes.
    pub b_re: Mat,
    pub b_im: Mat,
    /// Output map, `H × P`, split planes.
    pub c_re: Mat,
    pub c_im: Mat,
    /// Elementwise feedthrough, `1 × H`.
    pub d: Mat,
    /// Per-state log step size, `1 × P`.
    pub log_delta: Mat,
    pub ln_gamma: Mat,
    pub ln_beta: Mat,
    pub mlp_w1: Mat,
    pub mlp_b1: Mat,
    pub mlp_w2: Mat,
    pub mlp_b2: Mat,
}

impl S5LayerParams {
    pub fn state_size(&self) -> usize {
        self.lambda_re_raw.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.d.len()
    }

    /// Continuous eigenvalues `(Re λ, Im λ)`.
    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        self.lambda_re_raw
            .data
            .iter()
            .zip(&self.lambda_im.data)
            .map(|(r, i)| (-r.exp(), *i))
            .collect()
    }

    pub fn max_real_eigenvalue(&self) -> f64 {
        self.eigenvalues().iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Mat); 14] {
        [
            ("lambda_re_raw", &self.lambda_re_raw),
            ("lambda_im", &self.lambda_im),
            ("b_re", &self.b_re),
            ("b_im", &self.b_im),
            ("c_re", &self.c_re),
            ("c_im", &self.c_im),
            ("d", &self.d),
            ("log_delta", &self.log_delta),
            ("ln_gamma", &self.ln_gamma),
            ("ln_beta", &self.ln_beta),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Mat; 14] {
        [
            &mut self.lambda_re_raw,
            &mut self.lambda_im,
            &mut self.b_re,
            &mut self.b_im,
            &mut self.c_re,
            &mut self.c_im,
            &mut self.d,
            &mut self.log_delta,
            &mut self.ln_gamma,
            &mut self.ln_beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let (p, h) = (self.state_size(), self.hidden_size());
        let m = self.mlp_b1.len();
        let ok = self.lambda_im.shape() == (1, p)
            && self.log_delta.shape() == (1, p)
            && self.b_re.shape() == (p, h)
            && self.b_im.shape() == (p, h)
            && self.c_re.shape() == (h, p)
            && self.c_im.shape() == (h, p)
            && self.ln_gamma.len() == h
            && self.ln_beta.len() == h
            && self.mlp_w1.shape() == (m, h)
            && self.mlp_w2.shape() == (h, m)
            && self.mlp_b2.len() == h;
        if ok {
            Ok(())
        } else {
            Err(dim(format!("inconsistent S5 layer tensors for P={p}, H={h}")))
        }
    }
}

/// Entry `(n, k)` of the HiPPO-LegS state matrix.
pub fn legs_entry(n: usize, k: usize) -> f64 {
    use std::cmp::Ordering::*;
    match n.cmp(&k) {
        Greater => -((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt(),
        Equal => -((n + 1) as f64),
        Less => 0.0,
    }
}

/// The normal part of HiPPO-LegS: `A + ppᵀ` with `p_n = √(n + ½)`, which
/// equals `−½ I` plus a skew-symmetric matrix.
pub fn legs_normal_part(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |n, k| {
        legs_entry(n, k) + ((n as f64 + 0.5) * (k as f64 + 0.5)).sqrt()
    })
}

/// Eigenvalues and unitary eigenvectors of the LegS normal part. The
/// skew-symmetric part `S` is diagonalized through the Hermitian matrix
/// `iS`; eigenvalues are returned as `(re, im)` pairs.
pub fn legs_normal_eigen(p: usize) -> Result<(Vec<(f64, f64)>, DMatrix<Complex<f64>>)> {
    let normal = legs_normal_part(p);
    let real_part = (0..p).map(|i| normal[(i, i)]).sum::<f64>() / p as f64;
    let herm = DMatrix::from_fn(p, p, |n, k| {
        let skew = if n == k { 0.0 } else { normal[(n, k)] };
        Complex::new(0.0, skew)
    });
    let eig = herm.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Init("LegS eigendecomposition produced non-finite values".into()));
    }
    // S v = -i (iS) v = -i μ v
    let values = eig.eigenvalues.iter().map(|&mu| (real_part, -mu)).collect();
    Ok((values, eig.eigenvectors))
}

/// HiPPO-initialized S5 layer with `P` states, width `H` and an MLP of
/// width `mlp`.
pub fn hippo_init(p: usize, h: usize, mlp: usize, seed: u64) -> Result<S5LayerParams> {
    if p == 0 || h == 0 || mlp == 0 {
        return Err(Error::Init(format!("sizes must be positive (P={p}, H={h}, MLP={mlp})")));
    }
    let (eigs, v) = legs_normal_eigen(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |std: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    };

    let b_rand = DMatrix::from_fn(p, h, |_, _| Complex::new(normal(1.0 / (h as f64).sqrt()), 0.0));
    let c_rand = DMatrix::from_fn(h, p, |_, _| Complex::new(normal(1.0 / (p as f64).sqrt()), 0.0));
    let b = v.adjoint() * b_rand;
    let c = c_rand * &v;

    let split = |m: &DMatrix<Complex<f64>>| {
        let (r, c) = m.shape();
        let re = Mat::from_vec(r, c, (0..r * c).map(|i| m[(i / c, i % c)].re).collect()).unwrap();
        let im = Mat::from_vec(r, c, (0..r * c).map(|i| m[(i / c, i % c)].im).collect()).unwrap();
        (re, im)
    };
    let (b_re, b_im) = split(&b);
    let (c_re, c_im) = split(&c);

    let w1: Vec<f64> = (0..mlp * h).map(|_| normal(1.0 / (h as f64).sqrt())).collect();
    let w2: Vec<f64> = (0..h * mlp).map(|_| normal(0.5 / (mlp as f64).sqrt())).collect();
    let log_delta: Vec<f64> = (0..p)
        .map(|_| rng.random_range(DELTA_MIN.ln()..DELTA_MAX.ln()))
        .collect();

    Ok(S5LayerParams {
        lambda_re_raw: Mat::row_vector(eigs.iter().map(|e| (-e.0).ln()).collect()),
        lambda_im: Mat::row_vector(eigs.iter().map(|e| e.1).collect()),
        b_re,
        b_im,
        c_re,
        c_im,
        d: Mat::filled(1, h, 1.0),
        log_delta: Mat::row_vector(log_delta),
        ln_gamma: Mat::filled(1, h, 1.0),
        ln_beta: Mat::zeros(1, h),
        mlp_w1: Mat::from_vec(mlp, h, w1)?,
        mlp_b1: Mat::zeros(1, mlp),
        mlp_w2: Mat::from_vec(h, mlp, w2)?,
        mlp_b2: Mat::zeros(1, h),
    })
}

/// Discretized transition `ā` and input map `B̄` (split planes, `P × H`)
/// at runtime scale `s_delta`.
pub fn discretize(params: &S5LayerParams, s_delta: f64) -> Result<(ComplexVec, Mat, Mat)> {
    if !(s_delta > 0.0) || !s_delta.is_finite() {
        return Err(Error::Domain(format!("s_delta must be positive, got {s_delta}")));
    }
    params.check_shapes()?;
    let (p, h) = (params.state_size(), params.hidden_size());
    let mut a = ComplexVec::zeros(p);
    let mut b_re = Mat::zeros(p, h);
    let mut b_im = Mat::zeros(p, h);
    for (i, lam) in params.eigenvalues().into_iter().enumerate() {
        let delta = s_delta * params.log_delta.data[i].exp();
        let (ai, g) = zoh(lam, delta);
        a.re[i] = ai.0;
        a.im[i] = ai.1;
        for j in 0..h {
            let (br, bi) = (params.b_re.get(i, j), params.b_im.get(i, j));
            b_re.data[i * h + j] = g.0 * br - g.1 * bi;
            b_im.data[i * h + j] = g.0 * bi + g.1 * br;
        }
    }
    Ok((a, b_re, b_im))
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub lambda_re_raw: Var,
    pub lambda_im: Var,
    pub b_re: Var,
    pub b_im: Var,
    pub c_re: Var,
    pub c_im: Var,
    pub d: Var,
    pub log_delta: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl LayerVars {
    /// Records the layer's tensors as parameter leaves in slots
    /// `first_slot..first_slot + 14`.
    pub fn record(tape: &mut Tape, params: &S5LayerParams, first_slot: usize) -> Self {
        let t = params.tensors();
        let mut v = t.iter().enumerate().map(|(i, (_, m))| tape.param(first_slot + i, (*m).clone()));
        let mut next = || v.next().expect("14 layer tensors");
        Self {
            lambda_re_raw: next(),
            lambda_im: next(),
            b_re: next(),
            b_im: next(),
            c_re: next(),
            c_im: next(),
            d: next(),
            log_delta: next(),
            ln_gamma: next(),
            ln_beta: next(),
            mlp_w1: next(),
            mlp_b1: next(),
            mlp_w2: next(),
            mlp_b2: next(),
        }
    }
}

/// SSM block only: `h_t = Re(C s_t) + D ⊙ x_t`.
pub fn ssm_block_on_tape(tape: &mut Tape, x: Var, lv: &LayerVars, s_delta: f64) -> Result<Var> {
    let disc = tape.discretize(lv.lambda_re_raw, lv.lambda_im, lv.log_delta, s_delta)?;
    let u_re = tape.linear(x, lv.b_re, None)?;
    let u_im = tape.linear(x, lv.b_im, None)?;
    let s = tape.diag_scan(disc, u_re, u_im)?;
    let y = tape.complex_readout(s, lv.c_re, lv.c_im)?;
    let skip = tape.mul_row(x, lv.d)?;
    tape.add(y, skip)
}

/// Full S5 layer: SSM block, residual, then `h' + MLP(LN(h'))`.
pub fn s5_layer_on_tape(tape: &mut Tape, x: Var, lv: &LayerVars, s_delta: f64) -> Result<Var> {
    let h = ssm_block_on_tape(tape, x, lv, s_delta)?;
    let hp = tape.add(x, h)?;
    let n = tape.layer_norm(hp, lv.ln_gamma, lv.ln_beta)?;
    let z = tape.linear(n, lv.mlp_w1, Some(lv.mlp_b1))?;
    let z = tape.gelu(z)?;
    let z = tape.linear(z, lv.mlp_w2, Some(lv.mlp_b2))?;
    tape.add(hp, z)
}

/// Forward pass of one S5 layer over an `L × H` input.
pub fn s5_layer_forward(x_seq: &Mat, params: &S5LayerParams, s_delta: f64) -> Result<Mat> {
    params.check_shapes()?;
    if x_seq.cols != params.hidden_size() {
        return Err(dim(format!("layer width {} vs input {:?}", params.hidden_size(), x_seq.shape())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_seq.clone());
    let lv = LayerVars::record(&mut tape, params, 0);
    let out = s5_layer_on_tape(&mut tape, x, &lv, s_delta)?;
    Ok(tape.value(out)?.clone())
}

/// Linear embedding followed by the layer stack. Returns the last layer's
/// output at every step.
pub fn encode(
    x_norm: &Mat,
    config: &EncoderConfig,
    layers: &[S5LayerParams],
    embed_w: &Mat,
    embed_b: &Mat,
    s_delta: f64,
) -> Result<Mat> {
    if layers.len() != config.num_layers {
        return Err(dim(format!("{} layers for a {}-layer config", layers.len(), config.num_layers)));
    }
    if x_norm.cols != config.input_channels || embed_w.shape() != (config.hidden_size, config.input_channels) {
        return Err(dim(format!(
            "input {:?}, embedding {:?}, config expects {} channels",
            x_norm.shape(),
            embed_w.shape(),
            config.input_channels
        )));
    }
    for layer in layers {
        layer.check_shapes()?;
        if layer.hidden_size() != config.hidden_size || layer.state_size() != config.state_size {
            return Err(dim("layer shape disagrees with config"));
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_norm.clone());
    let w = tape.constant(embed_w.clone());
    let b = tape.constant(embed_b.clone());
    let mut h = tape.linear(x, w, Some(b))?;
    for (i, layer) in layers.iter().enumerate() {
        let lv = LayerVars::record(&mut tape, layer, i * 14);
        h = s5_layer_on_tape(&mut tape, h, &lv, s_delta)?;
    }
    Ok(tape.value(h)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legs_two_by_two() {
        assert_eq!(legs_entry(0, 0), -1.0);
        assert_eq!(legs_entry(0, 1), 0.0);
        assert!((legs_entry(1, 0) + 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(legs_entry(1, 1), -2.0);

        // closed-form eigenvalues of the 2×2 normal part [[α, β], [γ, δ]]
        let m = legs_normal_part(2);
        let (tr, det) = (m[(0, 0)] + m[(1, 1)], m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]);
        let disc = tr * tr / 4.0 - det;
        assert!(disc < 0.0);
        let want_im = (-disc).sqrt();
        let (eigs, _) = legs_normal_eigen(2).unwrap();
        for e in &eigs {
            assert!((e.0 - tr / 2.0).abs() < 1e-12);
            assert!(e.0 < 0.0);
            assert!((e.1.abs() - want_im).abs() < 1e-12);
        }
    }

    #[test]
    fn eigenvectors_diagonalize_normal_part() {
        let p = 8;
        let (eigs, v) = legs_normal_eigen(p).unwrap();
        let a = legs_normal_part(p).map(|x| Complex::new(x, 0.0));
        let av = &a * &v;
        for (k, e) in eigs.iter().enumerate() {
            for n in 0..p {
                let want = v[(n, k)] * Complex::new(e.0, e.1);
                assert!((av[(n, k)] - want).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn init_is_stable_and_deterministic() {
        for p in [1, 3, 16] {
            let layer = hippo_init(p, 6, 12, 7).unwrap();
            assert!(layer.max_real_eigenvalue() < 0.0);
            assert_eq!(layer, hippo_init(p, 6, 12, 7).unwrap());
            for v in &layer.log_delta.data {
                assert!((DELTA_MIN.ln()..DELTA_MAX.ln()).contains(v));
            }
        }
        assert_ne!(hippo_init(4, 6, 12, 1).unwrap(), hippo_init(4, 6, 12, 2).unwrap());
        assert!(hippo_init(0, 6, 12, 1).is_err());
    }

    #[test]
    fn discretize_scalar_cases() {
        let mut layer = hippo_init(1, 2, 2, 0).unwrap();
        layer.lambda_re_raw.data[0] = 0.0; // Re λ = −1
        layer.lambda_im.data[0] = 0.0;
        layer.log_delta.data[0] = std::f64::consts::LN_2.ln();
        layer.b_re.data = vec![2.0, -4.0];
        layer.b_im.data = vec![0.0, 0.0];
        let (a, b_re, _) = discretize(&layer, 1.0).unwrap();
        assert!((a.re[0] - 0.5).abs() < 1e-15);
        assert!((b_re.data[0] - 1.0).abs() < 1e-15 && (b_re.data[1] + 2.0).abs() < 1e-15);

        // semigroup in the scale factor
        let layer = hippo_init(6, 3, 3, 4).unwrap();
        let (a1, _, _) = discretize(&layer, 0.7).unwrap();
        let (a2, _, _) = discretize(&layer, 1.4).unwrap();
        for i in 0..6 {
            let sq = (a1.re[i] * a1.re[i] - a1.im[i] * a1.im[i], 2.0 * a1.re[i] * a1.im[i]);
            assert!((sq.0 - a2.re[i]).abs() < 1e-12 && (sq.1 - a2.im[i]).abs() < 1e-12);
        }
        assert!(discretize(&layer, 0.0).is_err());
        assert!(discretize(&layer, -1.0).is_err());
    }

    #[test]
    fn zero_input_gives_zero_ssm_output() {
        let layer = hippo_init(4, 5, 8, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Mat::zeros(7, 5));
        let lv = LayerVars::record(&mut tape, &layer, 0);
        let h = ssm_block_on_tape(&mut tape, x, &lv, 1.0).unwrap();
        assert!(tape.value(h).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_rejects_bad_width() {
        let layer = hippo_init(4, 5, 8, 3).unwrap();
        assert!(s5_layer_forward(&Mat::zeros(3, 4), &layer, 1.0).is_err());
    }
}
