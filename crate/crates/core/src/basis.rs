//! Functional basis decoder.
//!
//! Encoder outputs are read as coefficients of an orthonormal function
//! basis on a fixed interval. One base forecast horizon spans the whole
//! interval, so a forecast can be sampled at any step size: the `k`-th
//! step after the anchor sits at `u = a + (b - a) · k · s_Δ / T_base`.

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};

/// Basis function family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    /// Orthonormal Legendre polynomials on [-1, 1].
    #[default]
    Legendre,
    /// Orthonormal Legendre polynomials on [0, 1].
    HalfLegendre,
    /// Orthonormal Fourier series on [-1, 1].
    Fourier,
}

impl BasisFamily {
    pub fn domain(self) -> (f64, f64) {
        match self {
            BasisFamily::Legendre | BasisFamily::Fourier => (-1.0, 1.0),
            BasisFamily::HalfLegendre => (0.0, 1.0),
        }
    }
}

impl std::str::FromStr for BasisFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "legendre" => Ok(Self::Legendre),
            "half_legendre" => Ok(Self::HalfLegendre),
            "fourier" => Ok(Self::Fourier),
            other => Err(Error::Config(format!("unknown basis family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub n: usize,
    pub domain: (f64, f64),
}

impl BasisSpec {
    pub fn new(family: BasisFamily, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("basis needs at least one function".into()));
        }
        Ok(Self { family, n, domain: family.domain() })
    }

    fn validate(&self) -> Result<()> {
        let (a, b) = self.domain;
        if self.n == 0 || a >= b || self.domain != self.family.domain() {
            return Err(Error::Config(format!("invalid basis spec {self:?}")));
        }
        Ok(())
    }
}

/// Evaluates all `n` basis functions at `u`.
pub fn eval_basis(spec: &BasisSpec, u: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    let (a, b) = spec.domain;
    if !(a..=b).contains(&u) {
        return Err(Error::Domain(format!("u = {u} outside [{a}, {b}]")));
    }
    let mut out = vec![0.0; spec.n];
    match spec.family {
        BasisFamily::Legendre => {
            legendre_into(u, &mut out);
            for (i, v) in out.iter_mut().enumerate() {
                *v *= ((2 * i + 1) as f64 / 2.0).sqrt();
            }
        }
        BasisFamily::HalfLegendre => {
            legendre_into(2.0 * u - 1.0, &mut out);
            for (i, v) in out.iter_mut().enumerate() {
                *v *= ((2 * i + 1) as f64).sqrt();
            }
        }
        BasisFamily::Fourier => {
            out[0] = std::f64::consts::FRAC_1_SQRT_2;
            for (j, v) in out.iter_mut().enumerate().skip(1) {
                let k = j.div_ceil(2) as f64;
                let arg = std::f64::consts::PI * k * u;
                *v = if j % 2 == 1 { arg.cos() } else { arg.sin() };
            }
        }
    }
    Ok(out)
}

/// Unnormalized Legendre polynomials P_0..P_{n-1} by the three-term
/// recurrence.
fn legendre_into(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for k in 2..out.len() {
        let kf = k as f64;
        out[k] = ((2.0 * kf - 1.0) * x * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
    }
}

/// Number of output steps covering one base horizon at scale `s_delta`,
/// rounded half away from zero, at least 1.
pub fn effective_horizon(t_base: usize, s_delta: f64) -> usize {
    ((t_base as f64 / s_delta).round() as usize).max(1)
}

/// Basis coordinates of forecast steps `1..=steps` at scale `s_delta`.
/// Steps beyond one base horizon clamp to the right end of the domain.
pub fn sample_points(spec: &BasisSpec, t_base: usize, s_delta: f64, steps: usize) -> Vec<f64> {
    let (a, b) = spec.domain;
    (1..=steps)
        .map(|k| {
            let frac = (k as f64 * s_delta / t_base as f64).min(1.0);
            a + (b - a) * frac
        })
        .collect()
}

/// Row-major `points.len() × n` matrix of basis values.
pub fn basis_matrix(spec: &BasisSpec, points: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len() * spec.n);
    for &u in points {
        out.extend(eval_basis(spec, u)?);
    }
    Ok(out)
}

/// `W_out · o_last` reshaped to `K × n` (row-major, quantile-major).
pub fn decode_readout(
    o_last: &[f64],
    w_out: &[f64],
    k: usize,
    n: usize,
) -> Result<Vec<f64>> {
    let h = o_last.len();
    if w_out.len() != k * n * h {
        return Err(dim(format!("readout has {} weights, expected {}×{}×{}", w_out.len(), k, n, h)));
    }
    Ok(w_out.chunks_exact(h.max(1)).take(k * n).map(|row| dot(row, o_last)).collect())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A forecast held as basis coefficients, one row per quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousForecast {
    /// `K × n`, row-major.
    pub coeffs: Vec<f64>,
    pub quantiles: usize,
    pub basis: BasisSpec,
    pub s_delta: f64,
    pub t_base: usize,
    pub horizon_t_eff: usize,
}

impl ContinuousForecast {
    /// Continuous value of every quantile at basis coordinate `u`.
    pub fn eval_at(&self, u: f64) -> Result<Vec<f64>> {
        let phi = eval_basis(&self.basis, u)?;
        Ok(self.coeffs.chunks_exact(self.basis.n).map(|c| dot(c, &phi)).collect())
    }
}

/// Samples the forecast at `horizon_t_eff` equally spaced steps. Returns a
/// row-major `T_eff × K` matrix with quantiles sorted at every step.
pub fn sample_forecast(fc: &ContinuousForecast) -> Result<Vec<f64>> {
    let k = fc.quantiles;
    if fc.coeffs.len() != k * fc.basis.n {
        return Err(dim(format!("{} coefficients for {}×{}", fc.coeffs.len(), k, fc.basis.n)));
    }
    if !(fc.s_delta > 0.0) {
        return Err(Error::Domain(format!("s_delta must be positive, got {}", fc.s_delta)));
    }
    let points = sample_points(&fc.basis, fc.t_base, fc.s_delta, fc.horizon_t_eff);
    let mut out = Vec::with_capacity(points.len() * k);
    for &u in &points {
        let mut row = fc.eval_at(u)?;
        sort_quantiles(&mut row);
        out.extend(row);
    }
    Ok(out)
}

pub(crate) fn sort_quantiles(row: &mut [f64]) {
    row.sort_by(|a, b| a.total_cmp(b));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n.
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        (1..=n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let kf = k as f64;
                        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    fn gram(spec: &BasisSpec) -> Vec<f64> {
        let (a, b) = spec.domain;
        let n = spec.n;
        let mut g = vec![0.0; n * n];
        for (x, w) in gauss_legendre(256) {
            let u = a + (b - a) * (x + 1.0) / 2.0;
            let phi = eval_basis(spec, u).unwrap();
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] += w * (b - a) / 2.0 * phi[i] * phi[j];
                }
            }
        }
        g
    }

    #[test]
    fn all_families_are_orthonormal() {
        for family in [BasisFamily::Legendre, BasisFamily::HalfLegendre, BasisFamily::Fourier] {
            let spec = BasisSpec::new(family, 12).unwrap();
            let g = gram(&spec);
            for i in 0..12 {
                for j in 0..12 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g[i * 12 + j] - want).abs() < 1e-8, "{family:?} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn legendre_symmetry_and_endpoint() {
        let spec = BasisSpec::new(BasisFamily::Legendre, 6).unwrap();
        let at0 = eval_basis(&spec, 0.0).unwrap();
        for i in (1..6).step_by(2) {
            assert_eq!(at0[i], 0.0);
        }
        let spec3 = BasisSpec::new(BasisFamily::Legendre, 3).unwrap();
        let at1 = eval_basis(&spec3, 1.0).unwrap();
        let want = [0.5f64.sqrt(), 1.5f64.sqrt(), 2.5f64.sqrt()];
        for (g, w) in at1.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        assert!(eval_basis(&spec3, 1.5).is_err());
        let half = BasisSpec::new(BasisFamily::HalfLegendre, 3).unwrap();
        assert!(eval_basis(&half, -0.1).is_err());
    }

    #[test]
    fn readout_examples() {
        let h = 4;
        let mut eye = vec![0.0; h * h];
        for i in 0..h {
            eye[i * h + i] = 1.0;
        }
        let o = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(decode_readout(&o, &eye, 1, h).unwrap(), o.to_vec());
        assert_eq!(decode_readout(&[0.0; 4], &eye, 1, h).unwrap(), vec![0.0; 4]);
        assert!(decode_readout(&o, &eye[..8], 1, h).is_err());

        let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let got = decode_readout(&o, &w, 2, 3).unwrap();
        for r in 0..6 {
            let mut acc = 0.0;
            for c in 0..h {
                acc += w[r * h + c] * o[c];
            }
            assert!((got[r] - acc).abs() < 1e-12);
        }
    }

    fn forecast(coeffs: Vec<f64>, k: usize, family: BasisFamily, s: f64, t_eff: usize) -> ContinuousForecast {
        let n = coeffs.len() / k;
        ContinuousForecast {
            coeffs,
            quantiles: k,
            basis: BasisSpec::new(family, n).unwrap(),
            s_delta: s,
            t_base: 24,
            horizon_t_eff: t_eff,
        }
    }

    #[test]
    fn constant_coefficient_gives_unit_forecast() {
        let mut c = vec![0.0; 8];
        c[0] = 2f64.sqrt();
        let out = sample_forecast(&forecast(c, 1, BasisFamily::Legendre, 1.0, 24)).unwrap();
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let zero = sample_forecast(&forecast(vec![0.0; 8], 1, BasisFamily::Legendre, 1.0, 24)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    /// Projects `f` onto the basis with 256-point quadrature.
    fn project(spec: &BasisSpec, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let (a, b) = spec.domain;
        let mut c = vec![0.0; spec.n];
        for (x, w) in gauss_legendre(256) {
            let u = a + (b - a) * (x + 1.0) / 2.0;
            let phi = eval_basis(spec, u).unwrap();
            for i in 0..spec.n {
                c[i] += w * (b - a) / 2.0 * f(u) * phi[i];
            }
        }
        c
    }

    #[test]
    fn cubic_is_reproduced() {
        let spec = BasisSpec::new(BasisFamily::Legendre, 5).unwrap();
        let c = project(&spec, |u| u * u * u);
        let fc = forecast(c, 1, BasisFamily::Legendre, 1.0, 24);
        let out = sample_forecast(&fc).unwrap();
        let pts = sample_points(&spec, 24, 1.0, 24);
        for (v, u) in out.iter().zip(pts) {
            assert!((v - u * u * u).abs() < 1e-10);
        }
    }

    #[test]
    fn quantiles_are_sorted() {
        let c: Vec<f64> = (0..3 * 6).map(|i| ((i * 7) as f64).sin()).collect();
        let out = sample_forecast(&forecast(c, 3, BasisFamily::Fourier, 0.5, 48)).unwrap();
        for row in out.chunks(3) {
            assert!(row[0] <= row[1] && row[1] <= row[2]);
        }
    }

    #[test]
    fn coarse_samples_lie_on_fine_curve() {
        let c: Vec<f64> = (0..10).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let coarse = sample_forecast(&forecast(c.clone(), 1, BasisFamily::Legendre, 2.0, 12)).unwrap();
        let fine = sample_forecast(&forecast(c, 1, BasisFamily::Legendre, 1.0, 24)).unwrap();
        for (k, v) in coarse.iter().enumerate() {
            assert_eq!(*v, fine[2 * k + 1]);
        }
    }

    #[test]
    fn effective_horizon_rounds() {
        assert_eq!(effective_horizon(24, 1.0), 24);
        assert_eq!(effective_horizon(24, 0.5), 48);
        assert_eq!(effective_horizon(24, 5.0), 5);
        assert_eq!(effective_horizon(24, 100.0), 1);
    }

    proptest! {
        #[test]
        fn sampling_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let c1: Vec<f64> = (0..7).map(|i| ((seed + i) as f64 * 0.71).sin()).collect();
            let c2: Vec<f64> = (0..7).map(|i| ((seed * 3 + i) as f64 * 1.3).cos()).collect();
            let mix: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| alpha * a + b).collect();
            let f = |c: Vec<f64>| sample_forecast(&forecast(c, 1, BasisFamily::Legendre, 1.0, 24)).unwrap();
            let (f1, f2, fm) = (f(c1), f(c2), f(mix));
            for k in 0..24 {
                prop_assert!((fm[k] - (alpha * f1[k] + f2[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn polynomials_below_n_are_reproduced(coefs in prop::collection::vec(-2.0f64..2.0, 1..8)) {
            let n = 8;
            let spec = BasisSpec::new(BasisFamily::Legendre, n).unwrap();
            let poly = |u: f64| coefs.iter().rev().fold(0.0, |acc, c| acc * u + c);
            let c = project(&spec, poly);
            for u in sample_points(&spec, 24, 1.0, 24) {
                let v = dot(&c, &eval_basis(&spec, u).unwrap());
                prop_assert!((v - poly(u)).abs() < 1e-10);
            }
        }
    }
}
