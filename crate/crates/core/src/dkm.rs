//! Differentiable k-means: attention-based clustering unrolled on the autodiff tape.
//!
//! One forward pass runs `distance -> attention -> centroid candidate` until the
//! codebook moves by at most `epsilon` (Frobenius norm) or `max_iterations` is
//! hit, then recomputes the attention against the converged codebook and emits
//! `W~ = A C`. All iterations stay on the tape, so gradients with respect to the
//! weights flow through the whole loop. Centroids are derived state: the initial
//! codebook (warm start or seeding) enters the tape as a constant.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines;
use crate::error::{DkmError, Result};
use crate::gradcheck;
use crate::matrix::{DMatrix, Matrix, Scalar};

/// Column sums below this are treated as empty clusters.
pub const EMPTY_CLUSTER_MASS: f64 = 1e-30;

pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    RandomSample,
    #[default]
    KmeansPp,
}

/// How weights are assigned to centroids inside the clustering loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionMode {
    /// Temperature softmax over negative distances.
    #[default]
    Soft,
    /// One-hot nearest centroid.
    Hard,
    /// Gumbel-softmax samples, averaged over `draws`.
    Gumbel { draws: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DkmConfig {
    pub bits: u32,
    pub dim: usize,
    pub temperature: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub metric: Metric,
    pub init: Init,
}

impl Default for DkmConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            dim: 1,
            temperature: 1.0,
            epsilon: 1e-4,
            max_iterations: 5,
            metric: Metric::SquaredEuclidean,
            init: Init::KmeansPp,
        }
    }
}

impl DkmConfig {
    pub fn new(bits: u32, dim: usize, temperature: f64) -> Self {
        Self { bits, dim, temperature, ..Self::default() }
    }

    pub fn clusters(&self) -> usize {
        1 << self.bits
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(1..=MAX_BITS).contains(&self.bits) {
            problems.push(format!("bits must be in [1, {MAX_BITS}], got {}", self.bits));
        }
        if self.dim == 0 {
            problems.push("dim must be positive".to_string());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.epsilon >= 0.0) {
            problems.push(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.max_iterations == 0 {
            problems.push("max_iterations must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DkmError::Parameter(problems.join("; ")))
        }
    }
}

/// Weights laid out as `(ceil(N/d), d)` contiguous sub-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubvectorMatrix<T = f64> {
    values: Matrix<T>,
    original_length: usize,
    pad_count: usize,
}

impl<T: Scalar> SubvectorMatrix<T> {
    /// Wraps an existing `(count, d)` matrix that carries no padding.
    pub fn from_matrix(values: Matrix<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(DkmError::Parameter("empty weight matrix".into()));
        }
        let original_length = values.len();
        Ok(Self { values, original_length, pad_count: 0 })
    }

    pub(crate) fn from_parts(values: Matrix<T>, original_length: usize, pad_count: usize) -> Self {
        debug_assert_eq!(values.len(), original_length + pad_count);
        debug_assert!(pad_count < values.cols());
        Self { values, original_length, pad_count }
    }

    pub fn count(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    /// The first `original_length` values, padding dropped.
    pub fn flatten(&self) -> Vec<T> {
        self.values.as_slice()[..self.original_length].to_vec()
    }
}

/// Cluster centers, one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook<T = f64> {
    centroids: Matrix<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(centroids: Matrix<T>) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(DkmError::Parameter("codebook must be non-empty".into()));
        }
        if !centroids.all_finite() {
            return Err(DkmError::Numeric("codebook has non-finite entries".into()));
        }
        Ok(Self { centroids })
    }

    /// A codebook that must hold exactly `2^bits` centroids.
    pub fn with_bits(centroids: Matrix<T>, bits: u32) -> Result<Self> {
        if centroids.rows() != 1usize << bits {
            return Err(DkmError::Dimension(format!(
                "{bits}-bit codebook needs {} rows, got {}",
                1usize << bits,
                centroids.rows()
            )));
        }
        Self::new(centroids)
    }

    pub fn centroids(&self) -> &Matrix<T> {
        &self.centroids
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn row(&self, j: usize) -> &[T] {
        self.centroids.row(j)
    }
}

/// Row-stochastic soft assignment of sub-vectors to centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix<T = f64> {
    values: Matrix<T>,
}

impl<T: Scalar> AttentionMatrix<T> {
    pub fn new(values: Matrix<T>) -> Result<Self> {
        let tol = T::of(1e-6);
        for (i, row) in values.row_iter().enumerate() {
            let total = row.iter().fold(T::zero(), |a, &b| a + b);
            if (total - T::one()).abs() > tol || row.iter().any(|&v| v < T::zero() || v > T::one()) {
                return Err(DkmError::Numeric(format!("attention row {i} is not a probability vector")));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    /// Per-row index of the largest attention; lowest index wins ties.
    pub fn argmax_indices(&self) -> Vec<usize> {
        (0..self.values.rows()).map(|i| self.values.row_argmax(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DkmTelemetry {
    pub iterations_used: usize,
    pub final_delta: f64,
    pub converged: bool,
}

fn insufficient(needed: usize, got: usize) -> DkmError {
    DkmError::InsufficientData { needed, got }
}

/// Picks the starting codebook from the data. Deterministic for a given seed.
pub fn init_centroids<T: Scalar>(w: &SubvectorMatrix<T>, config: &DkmConfig, seed: u64) -> Result<Codebook<T>> {
    config.validate()?;
    seed_centroids(w.values(), config.clusters(), config.init, seed)
}

pub(crate) fn seed_centroids<T: Scalar>(w: &Matrix<T>, k: usize, init: Init, seed: u64) -> Result<Codebook<T>> {
    let n = w.rows();
    if n < k || k == 0 {
        return Err(insufficient(k, n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = match init {
        Init::RandomSample => sample(&mut rng, n, k).into_vec(),
        Init::KmeansPp => kmeans_pp_indices(w, k, &mut rng),
    };
    let mut data = Vec::with_capacity(k * w.cols());
    for &i in &chosen {
        data.extend_from_slice(w.row(i));
    }
    Codebook::new(Matrix::from_vec(k, w.cols(), data)?)
}

/// D²-weighted seeding. When every remaining point coincides with a chosen
/// center, the lowest unchosen index is taken.
fn kmeans_pp_indices<T: Scalar>(w: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = w.rows();
    let sq = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(w.row(i), w.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq(w.row(i), w.row(next)));
        }
    }
    chosen
}

/// Negative distances `d_ij = -f(w_i, c_j)` as a tape node.
pub fn distance_matrix<T: Scalar>(tape: &mut Tape<T>, w: Var, c: Var, metric: Metric) -> Result<Var> {
    let sq = tape.pairwise_sq_dist(w, c)?;
    let dist = match metric {
        Metric::SquaredEuclidean => sq,
        Metric::Euclidean => tape.sqrt(sq),
    };
    Ok(tape.neg(dist))
}

/// Temperature softmax over each row of the (negative) distance matrix.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, dist: Var, temperature: f64) -> Result<Var> {
    tape.row_softmax(dist, T::of(temperature))
}

/// Attention-weighted means `c~_j = sum_i a_ij w_i / sum_i a_ij`.
///
/// Centroids whose attention mass falls below [`EMPTY_CLUSTER_MASS`] keep
/// their value from `previous`.
pub fn centroid_update<T: Scalar>(tape: &mut Tape<T>, a: Var, w: Var, previous: Var) -> Result<Var> {
    let (n, k) = tape.shape(a);
    let (wn, d) = tape.shape(w);
    if n != wn || tape.shape(previous) != (k, d) {
        return Err(DkmError::Dimension(format!(
            "centroid_update: attention {n}x{k}, weights {wn}x{d}, previous {:?}",
            tape.shape(previous)
        )));
    }
    let at = tape.transpose(a);
    let numerator = tape.matmul(at, w)?;
    let mass_row = tape.sum_cols(a);
    let mass = tape.transpose(mass_row);
    let floor = T::of(EMPTY_CLUSTER_MASS);
    let populated: Vec<bool> = tape.value(mass).as_slice().iter().map(|&m| m >= floor).collect();
    if populated.iter().all(|&p| p) {
        let denom = tape.broadcast_col(mass, d)?;
        return tape.div(numerator, denom);
    }
    // lift empty denominators to 1 so the discarded branch stays finite
    let lift = Matrix::from_fn(k, 1, |j, _| if populated[j] { T::zero() } else { T::one() });
    let lift = tape.constant(lift);
    let safe_mass = tape.add(mass, lift)?;
    let denom = tape.broadcast_col(safe_mass, d)?;
    let candidate = tape.div(numerator, denom)?;
    tape.select_rows(populated, candidate, previous)
}

/// Value-level attention-weighted means, for callers without a tape.
pub fn centroid_update_values<T: Scalar>(a: &Matrix<T>, w: &Matrix<T>, previous: &Matrix<T>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let (a, w, p) = (tape.constant(a.clone()), tape.constant(w.clone()), tape.constant(previous.clone()));
    let c = centroid_update(&mut tape, a, w, p)?;
    Ok(tape.value(c).clone())
}

/// Nodes and state produced by one DKM forward pass on a caller's tape.
#[derive(Debug, Clone)]
pub struct DkmOutput<T = f64> {
    /// `A C`, same shape as the input sub-vector matrix.
    pub w_tilde: Var,
    /// Attention against the final codebook.
    pub attention: Var,
    /// Final codebook, detached; the next batch's warm start.
    pub codebook: Codebook<T>,
    pub telemetry: DkmTelemetry,
    /// Codebook after each executed iteration.
    pub trajectory: Vec<Codebook<T>>,
}

impl<T: Scalar> DkmOutput<T> {
    pub fn attention_matrix(&self, tape: &Tape<T>) -> AttentionMatrix<T> {
        AttentionMatrix { values: tape.value(self.attention).clone() }
    }
}

/// The clustering layer: configuration plus the attention rule.
#[derive(Debug, Clone, PartialEq)]
pub struct DkmLayer {
    pub config: DkmConfig,
    pub mode: AttentionMode,
}

impl DkmLayer {
    pub fn new(config: DkmConfig) -> Self {
        Self { config, mode: AttentionMode::Soft }
    }

    pub fn with_mode(config: DkmConfig, mode: AttentionMode) -> Self {
        Self { config, mode }
    }

    fn assign<T: Scalar>(&self, tape: &mut Tape<T>, dist: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        match self.mode {
            AttentionMode::Soft => attention(tape, dist, self.config.temperature),
            AttentionMode::Hard => {
                let hard = baselines::hard_attention(tape.value(dist));
                Ok(tape.constant(hard.values().clone()))
            }
            AttentionMode::Gumbel { draws } => {
                baselines::gumbel_attention_on_tape(tape, dist, self.config.temperature, draws, rng)
            }
        }
    }

    /// Runs the clustering loop on `w` (a `(count, d)` node on `tape`).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        w: Var,
        warm_start: Option<&Codebook<T>>,
        seed: u64,
    ) -> Result<DkmOutput<T>> {
        let cfg = &self.config;
        cfg.validate()?;
        let k = cfg.clusters();
        let (count, d) = tape.shape(w);
        if d != cfg.dim {
            return Err(DkmError::Dimension(format!("weights have dim {d}, config says {}", cfg.dim)));
        }
        if count < k {
            return Err(insufficient(k, count));
        }
        let initial = match warm_start {
            Some(c) => {
                if c.centroids().shape() != (k, d) {
                    return Err(DkmError::Dimension(format!("warm start is {}x{}, expected {k}x{d}", c.k(), c.dim())));
                }
                c.clone()
            }
            None => seed_centroids(tape.value(w), k, cfg.init, seed)?,
        };

        // separate stream so seeding and sampling never share draws
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut c = tape.constant(initial.into_matrix());
        let mut trajectory = Vec::with_capacity(cfg.max_iterations);
        let mut telemetry = DkmTelemetry { iterations_used: 0, final_delta: f64::INFINITY, converged: false };
        for iteration in 1..=cfg.max_iterations {
            let dist = distance_matrix(tape, w, c, cfg.metric)?;
            let a = self.assign(tape, dist, &mut rng)?;
            let candidate = centroid_update(tape, a, w, c)?;
            let cand_value = tape.value(candidate);
            if !cand_value.all_finite() {
                return Err(DkmError::Numeric(format!("non-finite centroid at iteration {iteration}")));
            }
            let delta = tape.value(c).frobenius_distance(cand_value)?.as_f64();
            trajectory.push(Codebook { centroids: cand_value.clone() });
            c = candidate;
            telemetry.iterations_used = iteration;
            telemetry.final_delta = delta;
            telemetry.converged = delta <= cfg.epsilon;
            // epsilon = 0 always runs the full iteration budget
            if telemetry.converged && cfg.epsilon > 0.0 {
                break;
            }
        }

        let dist = distance_matrix(tape, w, c, cfg.metric)?;
        let a = self.assign(tape, dist, &mut rng)?;
        let w_tilde = tape.matmul(a, c)?;
        if !tape.value(w_tilde).all_finite() {
            return Err(DkmError::Numeric(format!(
                "non-finite compressed weights after iteration {}",
                telemetry.iterations_used
            )));
        }
        Ok(DkmOutput {
            w_tilde,
            attention: a,
            codebook: Codebook { centroids: tape.value(c).clone() },
            telemetry,
            trajectory,
        })
    }
}

/// A self-contained forward pass: the tape, the input leaf and the outputs.
#[derive(Debug)]
pub struct DkmPass<T: Scalar = f64> {
    pub tape: Tape<T>,
    pub input: Var,
    pub output: DkmOutput<T>,
}

impl<T: Scalar> DkmPass<T> {
    pub fn w_tilde(&self) -> &Matrix<T> {
        self.tape.value(self.output.w_tilde)
    }

    pub fn attention(&self) -> AttentionMatrix<T> {
        self.output.attention_matrix(&self.tape)
    }
}

/// Runs soft DKM on `w` with its own tape.
pub fn dkm_forward<T: Scalar>(
    w: &SubvectorMatrix<T>,
    warm_start: Option<&Codebook<T>>,
    config: &DkmConfig,
    seed: u64,
) -> Result<DkmPass<T>> {
    let mut tape = Tape::new();
    let input = tape.leaf(w.values().clone());
    let output = DkmLayer::new(config.clone()).forward(&mut tape, input, warm_start, seed)?;
    Ok(DkmPass { tape, input, output })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked_entries: usize,
    /// Rows skipped because their two nearest centroids are tied within 1e-9.
    pub excluded_rows: usize,
}

/// Compares tape gradients of `||W~ - T||^2` (fixed random target `T`) with
/// central finite differences.
///
/// The initial codebook is seeded once from the unperturbed weights and
/// epsilon is forced to 0, so every probe runs the same number of iterations
/// from the same start.
pub fn dkm_gradient_check(w: &SubvectorMatrix<f64>, config: &DkmConfig, seed: u64) -> Result<GradCheckReport> {
    let mut cfg = config.clone();
    cfg.epsilon = 0.0;
    let start = init_centroids(w, &cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let target = DMatrix::from_fn(w.count(), w.dim(), |_, _| rng.random_range(-1.0..1.0));
    let layer = DkmLayer::new(cfg.clone());

    let loss_on = |tape: &mut Tape<f64>, x: Var| -> Result<(Var, DkmOutput<f64>)> {
        let out = layer.forward(tape, x, Some(&start), seed)?;
        let t = tape.constant(target.clone());
        let diff = tape.sub(out.w_tilde, t)?;
        let sq = tape.square(diff);
        Ok((tape.sum(sq), out))
    };

    let mut tape = Tape::new();
    let x = tape.leaf(w.values().clone());
    let (loss, out) = loss_on(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| DMatrix::zeros(w.count(), w.dim()));

    // rows whose nearest two centroids tie are excluded: their assignment is discontinuous
    let mut mask = vec![true; w.values().len()];
    let mut excluded_rows = 0;
    let mut check_tape = Tape::new();
    let xw = check_tape.constant(w.values().clone());
    for cb in std::iter::once(&start).chain(out.trajectory.iter()) {
        let cc = check_tape.constant(cb.centroids().clone());
        let dist = distance_matrix(&mut check_tape, xw, cc, cfg.metric)?;
        for (i, row) in check_tape.value(dist).row_iter().enumerate() {
            if mask[i * w.dim()] && near_tie(row, 1e-9) {
                excluded_rows += 1;
                mask[i * w.dim()..(i + 1) * w.dim()].fill(false);
            }
        }
    }

    let numeric = gradcheck::central_difference(w.values(), 1e-6, |probe| {
        let mut tape = Tape::new();
        let x = tape.leaf(probe.clone());
        match loss_on(&mut tape, x) {
            Ok((loss, _)) => tape.value(loss).get(0, 0),
            Err(_) => f64::NAN,
        }
    });
    let checked_entries = mask.iter().filter(|&&m| m).count();
    Ok(GradCheckReport {
        max_relative_error: gradcheck::max_relative_error_masked(&analytic, &numeric, Some(&mask)),
        checked_entries,
        excluded_rows,
    })
}

/// True when the two largest entries of `row` are within `tol`.
pub(crate) fn near_tie(row: &[f64], tol: f64) -> bool {
    if row.len() < 2 {
        return false;
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in row {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second <= tol
}
