//! A small fully connected classifier whose weight matrices may be clustered.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compression::LayerPolicy;
use crate::dkm::{AttentionMode, Codebook, DkmConfig};
use crate::error::{DkmError, Result};
use crate::matrix::DMatrix;

/// Optional per-layer replacement of fields in the default clustering config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SchemeOverride {
    pub bits: Option<u32>,
    pub dim: Option<usize>,
    pub temperature: Option<f64>,
    pub epsilon: Option<f64>,
    pub max_iterations: Option<usize>,
}

/// How each layer is clustered: a default config, policy rules, and
/// overrides keyed by layer name (`fc0`, `fc1`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScheme {
    pub base: DkmConfig,
    #[serde(default)]
    pub policy: LayerPolicy,
    #[serde(default)]
    pub overrides: BTreeMap<String, SchemeOverride>,
}

impl LayerScheme {
    pub fn uniform(base: DkmConfig) -> Self {
        Self { base, policy: LayerPolicy::default(), overrides: BTreeMap::new() }
    }

    /// Resolved config for one layer, or `None` when the layer stays uncompressed.
    pub fn config_for(&self, name: &str, index: usize, layer_count: usize, params: usize) -> Option<DkmConfig> {
        if !self.policy.should_compress(index, layer_count) {
            return None;
        }
        let mut cfg = self.base.clone();
        cfg.bits = self.policy.bits_for(params, cfg.bits);
        if let Some(o) = self.overrides.get(name) {
            cfg.bits = o.bits.unwrap_or(cfg.bits);
            cfg.dim = o.dim.unwrap_or(cfg.dim);
            cfg.temperature = o.temperature.unwrap_or(cfg.temperature);
            cfg.epsilon = o.epsilon.unwrap_or(cfg.epsilon);
            cfg.max_iterations = o.max_iterations.unwrap_or(cfg.max_iterations);
        }
        Some(cfg)
    }

    /// Same scheme with every layer's temperature set to `tau`.
    pub fn with_temperature(&self, tau: f64) -> Self {
        let mut out = self.clone();
        out.base.temperature = tau;
        for o in out.overrides.values_mut() {
            o.temperature = None;
        }
        out
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut out = self.clone();
        out.base.epsilon = epsilon;
        for o in out.overrides.values_mut() {
            o.epsilon = None;
        }
        out
    }
}

/// Shape of the classifier plus its clustering scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub scheme: Option<LayerScheme>,
}

impl ModelSpec {
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input];
        widths.extend(&self.hidden);
        widths.push(self.output);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Fresh model with He-normal weights and zero biases.
    pub fn build(&self, seed: u64) -> Result<Model> {
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(DkmError::Parameter("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = self.layer_dims();
        let count = dims.len();
        let mut layers = Vec::with_capacity(count);
        for (index, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let name = format!("fc{index}");
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weights = DMatrix::from_fn(fan_in, fan_out, |_, _| normal.sample(&mut rng));
            let compression = self.scheme.as_ref().and_then(|s| s.config_for(&name, index, count, fan_in * fan_out));
            if let Some(cfg) = &compression {
                cfg.validate()?;
                let subvectors = (fan_in * fan_out).div_ceil(cfg.dim);
                if subvectors < cfg.clusters() {
                    return Err(DkmError::InsufficientData { needed: cfg.clusters(), got: subvectors });
                }
            }
            layers.push(Layer { name, weights, bias: DMatrix::zeros(1, fan_out), compression, warm_start: None });
        }
        Ok(Model { spec: self.clone(), layers, attention: AttentionMode::Soft })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    /// `fan_in x fan_out`.
    pub weights: DMatrix,
    pub bias: DMatrix,
    pub compression: Option<DkmConfig>,
    /// Codebook carried over from the previous batch.
    pub warm_start: Option<Codebook<f64>>,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    /// Attention rule the compressed layers were trained with.
    #[serde(default)]
    pub attention: AttentionMode,
}

impl Model {
    pub fn compressed_layer_names(&self) -> Vec<String> {
        self.layers.iter().filter(|l| l.compression.is_some()).map(|l| l.name.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
