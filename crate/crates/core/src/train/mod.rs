//! Toy-scale training with clustered layers.
//!
//! Each batch builds one tape: every compressed layer's raw weights go through
//! the clustering loop to produce `W~`, the classifier runs on those, and the
//! cross-entropy gradient flows back through the loop to the raw weights. SGD
//! with momentum then updates the raw weights; codebooks are carried to the
//! next batch as detached warm starts.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod tau;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::compression::{reshape_to_subvectors, snap, snap_nearest};
use crate::dkm::{AttentionMode, Codebook, DkmLayer, DkmTelemetry, SubvectorMatrix};
use crate::error::{DkmError, Result};
use crate::matrix::{argmax, DMatrix};

pub use dataset::{make_dataset, Dataset, DatasetKind, DatasetSpec, Split};
pub use metrics::{BatchMetrics, TrainLog};
pub use model::{Layer, LayerScheme, Model, ModelSpec, SchemeOverride};
pub use tau::{tau_search, TauProbe, TauSearch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.008, momentum: 0.9, batch_size: 32, epochs: 20, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            problems.push("batch size must be positive".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DkmError::Parameter(problems.join("; ")))
        }
    }
}

/// Which clustering (if any) the compressed layers use during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainMode {
    Dkm,
    Hard,
    Gumbel {
        draws: usize,
    },
    /// Ignore the clustering scheme and train plain weights.
    None,
}

impl TrainMode {
    pub fn attention(self) -> Option<AttentionMode> {
        match self {
            TrainMode::Dkm => Some(AttentionMode::Soft),
            TrainMode::Hard => Some(AttentionMode::Hard),
            TrainMode::Gumbel { draws } => Some(AttentionMode::Gumbel { draws }),
            TrainMode::None => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Dkm => "dkm",
            TrainMode::Hard => "hard",
            TrainMode::Gumbel { .. } => "gumbel",
            TrainMode::None => "none",
        }
    }
}

/// splitmix64 finalizer over a seed and two stream coordinates.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Result of clustering one layer within a pass.
#[derive(Debug, Clone)]
pub struct LayerClustering {
    /// Train-time weights `W~`, reshaped back to `fan_in x fan_out`.
    pub effective: Var,
    pub codebook: Codebook<f64>,
    pub telemetry: DkmTelemetry,
    /// Snapped (inference-time) weights, `fan_in x fan_out`.
    pub snapped: DMatrix,
}

impl LayerClustering {
    /// Frobenius norm between train-time and inference-time weights.
    pub fn train_inference_error(&self, tape: &Tape<f64>) -> f64 {
        tape.value(self.effective).frobenius_distance(&self.snapped).expect("same shape")
    }
}

/// Clusters `layer`'s weights (already on the tape as `w`) and snaps them.
pub fn cluster_layer(
    tape: &mut Tape<f64>,
    layer: &Layer,
    w: Var,
    mode: AttentionMode,
    seed: u64,
) -> Result<Option<LayerClustering>> {
    let Some(cfg) = &layer.compression else { return Ok(None) };
    let (rows, cols) = layer.weights.shape();
    let count = (rows * cols).div_ceil(cfg.dim);
    let sub = tape.reshape_padded(w, count, cfg.dim);
    let out = DkmLayer::with_mode(cfg.clone(), mode).forward(tape, sub, layer.warm_start.as_ref(), seed)?;
    let effective = tape.reshape_padded(out.w_tilde, rows, cols);

    let subvectors: SubvectorMatrix<f64> = reshape_to_subvectors(layer.weights.as_slice(), cfg.dim)?;
    let (_, recon) = match mode {
        AttentionMode::Soft => snap(&subvectors, &out.attention_matrix(tape), &out.codebook)?,
        AttentionMode::Hard | AttentionMode::Gumbel { .. } => snap_nearest(&subvectors, &out.codebook)?,
    };
    let snapped = DMatrix::from_vec(rows, cols, recon.flatten())?;
    Ok(Some(LayerClustering { effective, codebook: out.codebook, telemetry: out.telemetry, snapped }))
}

/// Classifier forward pass with the given per-layer weight nodes; returns logits.
fn forward_logits(tape: &mut Tape<f64>, x: Var, weights: &[Var], biases: &[Var]) -> Result<Var> {
    let batch = tape.shape(x).0;
    let mut h = x;
    for (i, (&w, &b)) in weights.iter().zip(biases).enumerate() {
        let z = tape.matmul(h, w)?;
        let bb = tape.broadcast_row(b, batch)?;
        h = tape.add(z, bb)?;
        if i + 1 < weights.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn accuracy_of(logits: &DMatrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().enumerate().filter(|&(i, &l)| argmax(logits.row(i)) == l).count();
    hits as f64 / labels.len() as f64
}

/// Trains a copy of `model` and returns it with the per-batch log.
pub fn train(model: &Model, data: &Split, cfg: &TrainConfig, mode: TrainMode) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(DkmError::Parameter("empty training set".into()));
    }
    let mut model = model.clone();
    let attention = match mode.attention() {
        Some(a) => a,
        None => {
            for layer in &mut model.layers {
                layer.compression = None;
                layer.warm_start = None;
            }
            AttentionMode::Soft
        }
    };
    model.attention = attention;
    let layer_names = model.compressed_layer_names();
    let mut velocity_w: Vec<DMatrix> =
        model.layers.iter().map(|l| DMatrix::zeros(l.weights.rows(), l.weights.cols())).collect();
    let mut velocity_b: Vec<DMatrix> = model.layers.iter().map(|l| DMatrix::zeros(1, l.bias.cols())).collect();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5eed, 0));
    let mut log = TrainLog::new(layer_names);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.train.subset(chunk);
            let mut tape = Tape::new();
            let x = tape.constant(batch.features.clone());
            let mut weights = Vec::with_capacity(model.layers.len());
            let mut raw = Vec::with_capacity(model.layers.len());
            let mut biases = Vec::with_capacity(model.layers.len());
            let mut clusterings = Vec::new();
            for (li, layer) in model.layers.iter().enumerate() {
                let w = tape.leaf(layer.weights.clone());
                raw.push(w);
                biases.push(tape.leaf(layer.bias.clone()));
                let seed = derive_seed(cfg.seed, step + 1, li as u64);
                let effective = match cluster_layer(&mut tape, layer, w, attention, seed).map_err(|e| {
                    DkmError::Diverged { epoch, batch: batch_index, detail: format!("layer {}: {e}", layer.name) }
                })? {
                    Some(c) => {
                        let eff = c.effective;
                        clusterings.push((li, c));
                        eff
                    }
                    None => w,
                };
                weights.push(effective);
            }
            let logits = forward_logits(&mut tape, x, &weights, &biases)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let loss_value = tape.value(loss).get(0, 0);
            if !loss_value.is_finite() {
                return Err(DkmError::Diverged {
                    epoch,
                    batch: batch_index,
                    detail: format!("loss is {loss_value}; first non-finite layer: {}", first_bad_layer(&model)),
                });
            }
            let mut grads = tape.backward(loss)?;

            let mut errors = Vec::with_capacity(clusterings.len());
            let mut iterations = Vec::with_capacity(clusterings.len());
            for (li, c) in &clusterings {
                errors.push(c.train_inference_error(&tape));
                iterations.push(c.telemetry.iterations_used);
                model.layers[*li].warm_start = Some(c.codebook.clone());
            }
            for (li, layer) in model.layers.iter_mut().enumerate() {
                let gw =
                    grads.take(raw[li]).unwrap_or_else(|| DMatrix::zeros(layer.weights.rows(), layer.weights.cols()));
                let gb = grads.take(biases[li]).unwrap_or_else(|| DMatrix::zeros(1, layer.bias.cols()));
                if !gw.all_finite() || !gb.all_finite() {
                    return Err(DkmError::Diverged {
                        epoch,
                        batch: batch_index,
                        detail: format!("non-finite gradient in layer {}", layer.name),
                    });
                }
                sgd_momentum(&mut layer.weights, &mut velocity_w[li], &gw, cfg);
                sgd_momentum(&mut layer.bias, &mut velocity_b[li], &gb, cfg);
            }
            log.push(BatchMetrics {
                epoch,
                batch: batch_index,
                loss: loss_value,
                layer_errors: errors,
                layer_iterations: iterations,
            });
            step += 1;
        }
    }
    Ok((model, log))
}

fn first_bad_layer(model: &Model) -> String {
    model
        .layers
        .iter()
        .find(|l| !l.weights.all_finite() || !l.bias.all_finite())
        .map_or_else(|| "none (loss only)".to_string(), |l| l.name.clone())
}

/// `v = momentum * v + g; p -= lr * v`.
fn sgd_momentum(param: &mut DMatrix, velocity: &mut DMatrix, grad: &DMatrix, cfg: &TrainConfig) {
    for ((p, v), &g) in param.as_mut_slice().iter_mut().zip(velocity.as_mut_slice()).zip(grad.as_slice()) {
        *v = cfg.momentum * *v + g;
        *p -= cfg.learning_rate * *v;
    }
}

/// Seed used for the clustering pass inside [`evaluate`].
pub const EVAL_SEED: u64 = 0xe7a1;

/// Per-layer weights the classifier would run with: train-time `W~`, or the
/// snapped inference-time weights.
pub fn effective_weights(model: &Model, snapped: bool) -> Result<Vec<DMatrix>> {
    let mut tape = Tape::new();
    let mut out = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let w = tape.constant(layer.weights.clone());
        let seed = derive_seed(EVAL_SEED, 0, li as u64);
        out.push(match cluster_layer(&mut tape, layer, w, model.attention, seed)? {
            Some(c) if snapped => c.snapped,
            Some(c) => tape.value(c.effective).clone(),
            None => layer.weights.clone(),
        });
    }
    Ok(out)
}

/// Classification accuracy on `data`, with snapped or train-time weights.
pub fn evaluate(model: &Model, data: &Dataset, snapped: bool) -> Result<f64> {
    let weights = effective_weights(model, snapped)?;
    Ok(accuracy_with(model, &weights, data))
}

/// Accuracy for explicitly supplied per-layer weights.
pub fn accuracy_with(model: &Model, weights: &[DMatrix], data: &Dataset) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(data.features.clone());
    let ws: Vec<Var> = weights.iter().map(|w| tape.constant(w.clone())).collect();
    let bs: Vec<Var> = model.layers.iter().map(|l| tape.constant(l.bias.clone())).collect();
    let logits = forward_logits(&mut tape, x, &ws, &bs).expect("model shapes are consistent");
    accuracy_of(tape.value(logits), &data.labels)
}

/// Final numbers for a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub batches: usize,
    pub final_loss: f64,
    pub train_time_accuracy: f64,
    pub snapped_accuracy: f64,
    pub layers: Vec<String>,
}

pub fn summarize(
    model: &Model,
    log: &TrainLog,
    validation: &Dataset,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<RunSummary> {
    Ok(RunSummary {
        mode: mode.name().to_string(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        batches: log.batches.len(),
        final_loss: log.batches.last().map_or(f64::NAN, |b| b.loss),
        train_time_accuracy: evaluate(model, validation, false)?,
        snapped_accuracy: evaluate(model, validation, true)?,
        layers: log.layer_names.clone(),
    })
}
