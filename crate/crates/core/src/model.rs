//! The assembled forecaster: configuration, parameters, and the shared
//! forward graph used by both training and inference.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::basis::{basis_matrix, sample_points, sort_quantiles, BasisFamily, BasisSpec};
use crate::error::{dim, Error, Result};
use crate::norm::{causal_normalize_masked, CausalStats, VarianceMode};
use crate::ssm::{hippo_init, s5_layer_on_tape, EncoderConfig, LayerVars, S5LayerParams};
use crate::tensor::Mat;

/// Value channel plus observation-mask channel.
pub const INPUT_CHANNELS: usize = 2;

pub const BASE_SEASONALITY: f64 = 24.0;

pub fn default_quantiles() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Model hyperparameters, as stored in config files and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub state_size: usize,
    pub hidden_size: usize,
    pub mlp_size: usize,
    pub context_length: usize,
    pub min_context: usize,
    pub t_base: usize,
    pub basis: BasisFamily,
    pub basis_n: usize,
    pub quantile_levels: Vec<f64>,
    pub norm_variance_mode: VarianceMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            state_size: 16,
            hidden_size: 24,
            mlp_size: 48,
            context_length: 2048,
            min_context: 20,
            t_base: 24,
            basis: BasisFamily::Legendre,
            basis_n: 12,
            quantile_levels: default_quantiles(),
            norm_variance_mode: VarianceMode::ElementwiseCumsum,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            state_size: self.state_size,
            hidden_size: self.hidden_size,
            mlp_size: self.mlp_size,
            input_channels: INPUT_CHANNELS,
            context_length: self.context_length,
            min_context: self.min_context,
        }
    }

    pub fn basis_spec(&self) -> Result<BasisSpec> {
        BasisSpec::new(self.basis, self.basis_n)
    }

    pub fn quantiles(&self) -> usize {
        self.quantile_levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.basis_spec()?;
        if self.t_base == 0 {
            return Err(Error::Config("t_base must be positive".into()));
        }
        validate_levels(&self.quantile_levels)
    }

    pub fn median_index(&self) -> usize {
        median_index(&self.quantile_levels)
    }
}

/// Index of the level closest to 0.5 (the first one on ties).
pub fn median_index(levels: &[f64]) -> usize {
    let mut best = 0;
    for (i, q) in levels.iter().enumerate() {
        if (q - 0.5).abs() < (levels[best] - 0.5).abs() {
            best = i;
        }
    }
    best
}

pub fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Config("at least one quantile level is required".into()));
    }
    if levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(Error::Domain(format!("quantile levels must lie in (0, 1): {levels:?}")));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("quantile levels must be strictly increasing: {levels:?}")));
    }
    Ok(())
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `H × 2`.
    pub embed_w: Mat,
    /// `1 × H`.
    pub embed_b: Mat,
    pub layers: Vec<S5LayerParams>,
    /// `(K·n) × H`, quantile-major rows.
    pub readout: Mat,
}

pub const TENSORS_PER_LAYER: usize = 14;

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut normal = |std: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        };
        let embed_w = Mat::from_vec(h, INPUT_CHANNELS, (0..h * INPUT_CHANNELS).map(|_| normal(1.0)).collect())?;
        let rows = config.quantiles() * config.basis_n;
        let readout = Mat::from_vec(rows, h, (0..rows * h).map(|_| normal(0.1 / (h as f64).sqrt())).collect())?;
        let layers = (0..config.num_layers)
            .map(|l| {
                let seed = config.init_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(l as u64 + 1);
                hippo_init(config.state_size, h, config.mlp_size, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed_w, embed_b: Mat::zeros(1, h), layers, readout })
    }

    /// `(name, tensor)` pairs in slot order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("embed_w".to_string(), &self.embed_w), ("embed_b".to_string(), &self.embed_b)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.tensors() {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out.push(("readout".to_string(), &self.readout));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.readout);
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_tensors().iter().map(|(_, m)| m.shape()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn max_real_eigenvalue(&self) -> f64 {
        self.layers.iter().map(|l| l.max_real_eigenvalue()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Parameter handles on a tape.
pub struct ParamVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub layers: Vec<LayerVars>,
    pub readout: Var,
}

impl ParamVars {
    pub fn record(tape: &mut Tape, params: &ModelParams) -> Self {
        let embed_w = tape.param(0, params.embed_w.clone());
        let embed_b = tape.param(1, params.embed_b.clone());
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| LayerVars::record(tape, layer, 2 + l * TENSORS_PER_LAYER))
            .collect();
        let readout = tape.param(2 + params.layers.len() * TENSORS_PER_LAYER, params.readout.clone());
        Self { embed_w, embed_b, layers, readout }
    }
}

/// Encoder input rows `[normalized value, missing flag]`.
pub fn input_features(x_norm: &[f64], missing: &[bool]) -> Result<Mat> {
    if x_norm.len() != missing.len() {
        return Err(dim("feature value and mask lengths differ"));
    }
    let mut m = Mat::zeros(x_norm.len(), INPUT_CHANNELS);
    for t in 0..x_norm.len() {
        m.data[2 * t] = if missing[t] { 0.0 } else { x_norm[t] };
        m.data[2 * t + 1] = if missing[t] { 1.0 } else { 0.0 };
    }
    Ok(m)
}

/// Records the encoder on `tape`, returning `L × H` outputs.
pub fn encoder_on_tape(tape: &mut Tape, pv: &ParamVars, features: Var, s_delta: f64) -> Result<Var> {
    let mut h = tape.linear(features, pv.embed_w, Some(pv.embed_b))?;
    for lv in &pv.layers {
        h = s5_layer_on_tape(tape, h, lv, s_delta)?;
    }
    Ok(h)
}

/// Records coefficient readout and basis sampling for encoder rows
/// `start..end`. Output is `A × (T·K)` in normalized units.
pub fn decoder_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    encoded: Var,
    start: usize,
    end: usize,
    phi: Arc<Mat>,
    quantiles: usize,
) -> Result<Var> {
    let rows = tape.slice_rows(encoded, start, end)?;
    let coeffs = tape.linear(rows, pv.readout, None)?;
    tape.basis_expand(coeffs, phi, quantiles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Result of encoding one channel.
pub struct Encoded {
    pub outputs: Mat,
    pub stats: CausalStats,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Self { config, params })
    }

    /// `T × n` basis matrix for `steps` forecast steps at scale `s_delta`.
    pub fn basis_for(&self, s_delta: f64, steps: usize) -> Result<Mat> {
        let spec = self.config.basis_spec()?;
        let pts = sample_points(&spec, self.config.t_base, s_delta, steps);
        Mat::from_vec(steps, spec.n, basis_matrix(&spec, &pts)?)
    }

    /// Normalizes (skipping missing steps) and encodes one channel.
    pub fn encode_channel(&self, values: &[f64], missing: &[bool], s_delta: f64) -> Result<Encoded> {
        let (x_norm, stats) =
            causal_normalize_masked(values, Some(missing), self.config.norm_variance_mode)?;
        let features = input_features(&x_norm, missing)?;
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &self.params);
        let f = tape.constant(features);
        let out = encoder_on_tape(&mut tape, &pv, f, s_delta)?;
        Ok(Encoded { outputs: tape.value(out)?.clone(), stats })
    }

    /// Basis coefficients (`K × n`) from one encoder output row.
    pub fn coefficients(&self, o: &[f64]) -> Result<Vec<f64>> {
        crate::basis::decode_readout(o, &self.params.readout.data, self.config.quantiles(), self.config.basis_n)
    }

    /// Decodes the forecast anchored at 0-based row `anchor` of `enc`:
    /// `steps × K` in data units, quantiles sorted per step.
    pub fn decode_at(&self, enc: &Encoded, anchor: usize, s_delta: f64, steps: usize) -> Result<Mat> {
        if anchor >= enc.outputs.rows {
            return Err(Error::Index { index: anchor + 1, len: enc.outputs.rows });
        }
        let coeffs = self.coefficients(enc.outputs.row(anchor))?;
        let phi = self.basis_for(s_delta, steps)?;
        let (k, n) = (self.config.quantiles(), self.config.basis_n);
        let (mu, sigma) = enc.stats.at(anchor + 1)?;
        let mut out = Mat::zeros(steps, k);
        for t in 0..steps {
            let row = out.row_mut(t);
            for q in 0..k {
                let v: f64 = crate::basis::dot(&coeffs[q * n..(q + 1) * n], phi.row(t));
                row[q] = v * sigma + mu;
            }
            sort_quantiles(row);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            state_size: 4,
            hidden_size: 8,
            mlp_size: 8,
            context_length: 16,
            min_context: 4,
            t_base: 6,
            basis_n: 5,
            quantile_levels: vec![0.1, 0.5, 0.9],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn slots_line_up_with_tape_records() {
        let model = Model::init(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &model.params);
        assert_eq!(tape.len(), model.params.named_tensors().len());
        assert_eq!(tape.value(pv.readout).unwrap(), &model.params.readout);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.quantile_levels = vec![0.5, 0.1];
        assert!(c.validate().is_err());
        c.quantile_levels = vec![0.0, 0.5];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.min_context = 16;
        assert!(c.validate().is_err());
        assert_eq!(tiny_config().median_index(), 1);
    }

    #[test]
    fn toml_round_trip_rejects_unknown_keys() {
        let c = tiny_config();
        let text = toml::to_string(&c).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
        let partial: ModelConfig = toml::from_str("basis = \"fourier\"\nbasis_n = 7").unwrap();
        assert_eq!(partial.basis, BasisFamily::Fourier);
    }
}
