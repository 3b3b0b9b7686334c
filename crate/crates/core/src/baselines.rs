//! Reference clustering schemes: hard assignment, Gumbel-softmax attention,
//! Lloyd's k-means and EM for an isotropic Gaussian mixture with fixed variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::dkm::{seed_centroids, AttentionMatrix, Codebook, Init, SubvectorMatrix, EMPTY_CLUSTER_MASS};
use crate::error::{DkmError, Result};
use crate::matrix::{argmax, DMatrix, Matrix, Scalar};

/// One-hot rows at the largest entry of each row of the negative-distance
/// matrix (the nearest centroid). Ties go to the lowest index.
///
/// Used inside the clustering loop this is a constant on the tape: gradients
/// reach the weights only through the centroid means, so each weight receives
/// the gradient of the centroid it is assigned to, averaged over the cluster.
pub fn hard_attention<T: Scalar>(dist: &Matrix<T>) -> AttentionMatrix<T> {
    let mut out = Matrix::zeros(dist.rows(), dist.cols());
    for i in 0..dist.rows() {
        out.set(i, argmax(dist.row(i)), T::one());
    }
    AttentionMatrix::new(out).expect("one-hot rows are stochastic")
}

fn gumbel_noise<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        T::of(-(-u.ln()).ln())
    })
}

/// Averages `draws` Gumbel-softmax samples `softmax((d + g) / tau)` on the tape.
/// The noise enters as a constant.
pub fn gumbel_attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    dist: Var,
    temperature: f64,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if draws == 0 {
        return Err(DkmError::Parameter("gumbel draws must be at least 1".into()));
    }
    let (n, k) = tape.shape(dist);
    let mut total: Option<Var> = None;
    for _ in 0..draws {
        let g = tape.constant(gumbel_noise(n, k, rng));
        let noisy = tape.add(dist, g)?;
        let sample = tape.row_softmax(noisy, T::of(temperature))?;
        total = Some(match total {
            None => sample,
            Some(t) => tape.add(t, sample)?,
        });
    }
    let total = total.expect("draws >= 1");
    Ok(if draws == 1 { total } else { tape.scalar_mul(total, T::of(1.0 / draws as f64)) })
}

/// Value-level Gumbel-softmax attention, seeded.
pub fn gumbel_attention<T: Scalar>(
    dist: &Matrix<T>,
    temperature: f64,
    seed: u64,
    draws: usize,
) -> Result<AttentionMatrix<T>> {
    if !(temperature > 0.0) {
        return Err(DkmError::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    if draws == 0 {
        return Err(DkmError::Parameter("gumbel draws must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Matrix::zeros(dist.rows(), dist.cols());
    for _ in 0..draws {
        let noisy = dist.zip_map(&gumbel_noise(dist.rows(), dist.cols(), &mut rng), |a, b| a + b)?;
        let sample = softmax_rows(&noisy, T::of(temperature));
        acc = acc.zip_map(&sample, |a, b| a + b)?;
    }
    let scale = T::of(1.0 / draws as f64);
    AttentionMatrix::new(acc.map(|v| v * scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LloydResult {
    pub codebook: Codebook<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid after each update.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl LloydResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one iteration")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row; ties go to the lowest index.
pub fn nearest_assignments(w: &DMatrix, centroids: &DMatrix) -> Vec<usize> {
    w.row_iter()
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for j in 0..centroids.rows() {
                let d = sq_dist(x, centroids.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// Lloyd's algorithm from k-means++ seeds.
pub fn lloyd_kmeans(w: &SubvectorMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<LloydResult> {
    let data = w.values();
    let mut centroids = seed_centroids(data, k, Init::KmeansPp, seed)?.into_matrix();
    let mut assignments = nearest_assignments(data, &centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut sums = DMatrix::zeros(k, data.cols());
        let mut counts = vec![0usize; k];
        for (x, &j) in data.row_iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums.row_mut(j).iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                for (c, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s / n;
                }
            }
        }
        history.push(data.row_iter().zip(&assignments).map(|(x, &j)| sq_dist(x, centroids.row(j))).sum());
        let next = nearest_assignments(data, &centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(LloydResult { codebook: Codebook::new(centroids)?, assignments, objective_history: history, iterations })
}

/// Isotropic Gaussian mixture with uniform mixing weights and a fixed shared variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmState {
    pub centers: DMatrix,
    pub variance: f64,
}

impl GmmState {
    pub fn new(centers: DMatrix, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(DkmError::Parameter(format!("variance must be positive, got {variance}")));
        }
        Ok(Self { centers, variance })
    }

    /// The mixture matching soft attention at `temperature`: variance = temperature / 2.
    pub fn for_temperature(centers: DMatrix, temperature: f64) -> Result<Self> {
        Self::new(centers, temperature / 2.0)
    }

    pub fn k(&self) -> usize {
        self.centers.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmStep {
    pub responsibilities: DMatrix,
    pub centers: DMatrix,
    /// `ln P(W | C)` at the centers the step started from.
    pub log_likelihood: f64,
}

/// `ln N(x | c, variance I)`.
fn log_gaussian(x: &[f64], c: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    -sq_dist(x, c) / (2.0 * variance) - 0.5 * d * (2.0 * std::f64::consts::PI * variance).ln()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-point log joint `ln(1/k) + ln N(w_i | c_j)`.
fn log_joint(w: &DMatrix, state: &GmmState) -> Result<DMatrix> {
    if w.cols() != state.centers.cols() {
        return Err(DkmError::Dimension(format!(
            "weights have dim {}, centers have dim {}",
            w.cols(),
            state.centers.cols()
        )));
    }
    let log_mix = -(state.k() as f64).ln();
    Ok(DMatrix::from_fn(w.rows(), state.k(), |i, j| {
        log_mix + log_gaussian(w.row(i), state.centers.row(j), state.variance)
    }))
}

/// `ln P(W | C) = sum_i ln sum_j (1/k) N(w_i | c_j, variance)`.
pub fn log_likelihood(w: &DMatrix, state: &GmmState) -> Result<f64> {
    let joint = log_joint(w, state)?;
    Ok(joint.row_iter().map(log_sum_exp).sum())
}

/// One EM iteration with fixed variance and mixing: E-step responsibilities,
/// then an M-step that only moves the centers. Centers with responsibility mass
/// below the empty-cluster threshold are left where they were.
pub fn em_gmm_step(w: &DMatrix, state: &GmmState) -> Result<EmStep> {
    let joint = log_joint(w, state)?;
    let k = state.k();
    let mut resp = DMatrix::zeros(w.rows(), k);
    let mut ll = 0.0;
    for i in 0..w.rows() {
        let lse = log_sum_exp(joint.row(i));
        ll += lse;
        for (r, &lj) in resp.row_mut(i).iter_mut().zip(joint.row(i)) {
            *r = (lj - lse).exp();
        }
    }
    let mut centers = state.centers.clone();
    for j in 0..k {
        let mass: f64 = (0..w.rows()).map(|i| resp.get(i, j)).sum();
        if mass < EMPTY_CLUSTER_MASS {
            continue;
        }
        for t in 0..w.cols() {
            let s: f64 = (0..w.rows()).map(|i| resp.get(i, j) * w.get(i, t)).sum();
            centers.set(j, t, s / mass);
        }
    }
    Ok(EmStep { responsibilities: resp, centers, log_likelihood: ll })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> DMatrix {
        DMatrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn hard_examples() {
        let d = DMatrix::from_rows(&[vec![-1.0, -4.0], vec![-2.0, -2.0], vec![-5.0, -0.5]]).unwrap();
        let a = hard_attention(&d);
        assert_eq!(a.values().as_slice(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gumbel_near_zero_temperature_is_one_hot() {
        let d = DMatrix::from_rows(&[vec![-1.0, -1.3, -2.0], vec![-0.2, -0.1, -3.0]]).unwrap();
        let a = gumbel_attention(&d, 1e-9, 5, 1).unwrap();
        for row in a.values().row_iter() {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 2);
        }
    }

    #[test]
    fn gumbel_rejects_bad_args() {
        let d = DMatrix::zeros(1, 2);
        assert!(gumbel_attention(&d, 0.0, 0, 1).is_err());
        assert!(gumbel_attention(&d, 1.0, 0, 0).is_err());
    }

    #[test]
    fn lloyd_two_obvious_clusters() {
        let w = SubvectorMatrix::from_matrix(col(&[0.0, 0.0, 10.0, 10.0])).unwrap();
        let r = lloyd_kmeans(&w, 2, 1, 20).unwrap();
        let mut c = r.codebook.centroids().as_slice().to_vec();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(r.objective(), 0.0);
    }

    #[test]
    fn lloyd_k_equals_n() {
        let w = SubvectorMatrix::from_matrix(col(&[0.3, -1.0, 2.5, 7.0, 4.0])).unwrap();
        let r = lloyd_kmeans(&w, 5, 9, 20).unwrap();
        assert_eq!(r.objective(), 0.0);
        assert!(lloyd_kmeans(&w, 6, 9, 20).is_err());
    }

    #[test]
    fn single_component_em() {
        let w = col(&[1.0, 2.0, 6.0]);
        let state = GmmState::new(col(&[0.0]), 0.5).unwrap();
        let step = em_gmm_step(&w, &state).unwrap();
        assert!(step.responsibilities.as_slice().iter().all(|&r| r == 1.0));
        assert!((step.centers.get(0, 0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn gmm_rejects_nonpositive_variance() {
        assert!(GmmState::new(col(&[0.0]), 0.0).is_err());
        assert!(GmmState::for_temperature(col(&[0.0]), -1.0).is_err());
    }

    #[test]
    fn log_likelihood_survives_tiny_variance() {
        let w = col(&[0.0, 0.01, 1.0]);
        let state = GmmState::for_temperature(col(&[0.0, 1.0]), 8e-6).unwrap();
        let ll = log_likelihood(&w, &state).unwrap();
        assert!(ll.is_finite());
        let step = em_gmm_step(&w, &state).unwrap();
        assert!(step.responsibilities.all_finite());
    }
}
