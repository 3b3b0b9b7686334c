//! Clustering checked against brute-force oracles written independently here.

use dkm::autodiff::Tape;
use dkm::baselines::{em_gmm_step, gumbel_attention, hard_attention, lloyd_kmeans, GmmState};
use dkm::dkm::{
    attention, centroid_update, distance_matrix, dkm_forward, init_centroids, Codebook, DkmConfig, Init, Metric,
    SubvectorMatrix,
};
use dkm::matrix::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_w(n: usize, d: usize, seed: u64) -> DMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

// Same draw protocol as the crate: uniform first pick, then the first index
// whose running D^2 sum exceeds u * total.
fn kmeans_pp_oracle(w: &DMatrix, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = w.rows();
    let mut picks = vec![rng.random_range(0..n)];
    while picks.len() < k {
        let d2: Vec<f64> =
            (0..n).map(|i| picks.iter().map(|&p| sq(w.row(i), w.row(p))).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut run = 0.0;
        let mut pick = 0;
        for (i, &v) in d2.iter().enumerate() {
            if v > 0.0 {
                run += v;
                pick = i;
                if run > target {
                    break;
                }
            }
        }
        picks.push(pick);
    }
    picks
}

#[test]
fn kmeans_pp_matches_oracle() {
    for seed in 0..25 {
        let w = random_w(40, 2, 100 + seed);
        let sub = SubvectorMatrix::from_matrix(w.clone()).unwrap();
        let mut cfg = DkmConfig::new(3, 2, 1.0);
        cfg.init = Init::KmeansPp;
        let got = init_centroids(&sub, &cfg, seed).unwrap();
        let picks = kmeans_pp_oracle(&w, 8, seed);
        for (j, &p) in picks.iter().enumerate() {
            assert_eq!(got.row(j), w.row(p), "seed {seed} centroid {j}");
        }
    }
}

#[test]
fn random_sample_init_picks_distinct_rows() {
    let w = DMatrix::from_fn(30, 1, |i, _| i as f64);
    let sub = SubvectorMatrix::from_matrix(w).unwrap();
    let mut cfg = DkmConfig::new(3, 1, 1.0);
    cfg.init = Init::RandomSample;
    let c = init_centroids(&sub, &cfg, 9).unwrap();
    let mut vals: Vec<f64> = c.centroids().as_slice().to_vec();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    assert_eq!(vals.len(), 8);
    assert_eq!(init_centroids(&sub, &cfg, 9).unwrap(), c);
}

#[test]
fn distances_attention_and_update_match_loops() {
    let w = random_w(17, 3, 1);
    let c = random_w(4, 3, 2);
    let tau = 0.6;
    for metric in [Metric::SquaredEuclidean, Metric::Euclidean] {
        let mut tape = Tape::new();
        let (wv, cv) = (tape.constant(w.clone()), tape.constant(c.clone()));
        let dist = distance_matrix(&mut tape, wv, cv, metric).unwrap();
        let a = attention(&mut tape, dist, tau).unwrap();
        let upd = centroid_update(&mut tape, a, wv, cv).unwrap();

        let f = |i: usize, j: usize| {
            let s = sq(w.row(i), c.row(j));
            if metric == Metric::Euclidean {
                s.sqrt()
            } else {
                s
            }
        };
        for i in 0..17 {
            let z: f64 = (0..4).map(|j| (-f(i, j) / tau).exp()).sum();
            for j in 0..4 {
                assert!((tape.value(dist).get(i, j) + f(i, j)).abs() < 1e-12);
                assert!((tape.value(a).get(i, j) - (-f(i, j) / tau).exp() / z).abs() < 1e-12);
            }
        }
        for j in 0..4 {
            let mass: f64 = (0..17).map(|i| tape.value(a).get(i, j)).sum();
            for t in 0..3 {
                let num: f64 = (0..17).map(|i| tape.value(a).get(i, j) * w.get(i, t)).sum();
                assert!((tape.value(upd).get(j, t) - num / mass).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dkm_trajectory_follows_em() {
    for seed in 0..10 {
        let w = random_w(50, 2, seed);
        let sub = SubvectorMatrix::from_matrix(w.clone()).unwrap();
        let mut cfg = DkmConfig::new(2, 2, 0.5);
        cfg.epsilon = 0.0;
        let start = init_centroids(&sub, &cfg, seed).unwrap();
        let pass = dkm_forward(&sub, Some(&start), &cfg, seed).unwrap();
        let mut state = GmmState::for_temperature(start.centroids().clone(), cfg.temperature).unwrap();
        for step in &pass.output.trajectory {
            state.centers = em_gmm_step(&w, &state).unwrap().centers;
            let diff = state.centers.max_abs_diff(step.centroids()).unwrap();
            assert!(diff <= 1e-8, "seed {seed}: {diff}");
        }
        assert_eq!(pass.output.trajectory.len(), 5);
    }
}

#[test]
fn empty_cluster_keeps_previous_centroid() {
    let w = DMatrix::from_vec(4, 1, vec![0.0, 0.1, 0.2, 0.3]).unwrap();
    let sub = SubvectorMatrix::from_matrix(w).unwrap();
    let start = Codebook::new(DMatrix::from_vec(2, 1, vec![0.15, 1e6]).unwrap()).unwrap();
    let pass = dkm_forward(&sub, Some(&start), &DkmConfig::new(1, 1, 0.01), 0).unwrap();
    assert_eq!(pass.output.codebook.row(1), &[1e6]);
    assert!((pass.output.codebook.row(0)[0] - 0.15).abs() < 1e-12);
    assert!(pass.w_tilde().all_finite());
}

#[test]
fn tiny_temperature_matches_hard_attention() {
    let w = random_w(64, 1, 3);
    let c = DMatrix::from_vec(4, 1, vec![-1.5, -0.5, 0.5, 1.5]).unwrap();
    let mut tape = Tape::new();
    let (wv, cv) = (tape.constant(w), tape.constant(c));
    let dist = distance_matrix(&mut tape, wv, cv, Metric::SquaredEuclidean).unwrap();
    let a = attention(&mut tape, dist, 1e-7).unwrap();
    let hard = hard_attention(tape.value(dist));
    assert!(tape.value(a).max_abs_diff(hard.values()).unwrap() < 1e-6);
}

/// Exhaustive minimum of the k-means objective over all labelings.
fn best_partition(x: &[f64], k: usize) -> f64 {
    let n = x.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut cost = 0.0;
        for j in 0..k {
            let members: Vec<f64> = (0..n).filter(|&i| labels[i] == j).map(|i| x[i]).collect();
            if !members.is_empty() {
                let m = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
        }
        best = best.min(cost);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn lloyd_reaches_partition_optimum() {
    // 3^12 labelings; three loose groups
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..12).map(|i| (i % 3) as f64 * 3.0 + rng.random_range(-1.0..1.0)).collect();
    let optimum = best_partition(&x, 3);
    let sub = SubvectorMatrix::from_matrix(DMatrix::from_vec(12, 1, x.clone()).unwrap()).unwrap();
    let mut best_run = f64::INFINITY;
    for seed in 0..5 {
        let r = lloyd_kmeans(&sub, 3, seed, 100).unwrap();
        for pair in r.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        best_run = best_run.min(r.objective());
    }
    assert!((best_run - optimum).abs() < 1e-9, "lloyd {best_run} vs optimum {optimum}");
}

#[test]
fn gumbel_max_frequencies_match_softmax() {
    // as tau -> 0 each draw is one-hot at argmax(d + g), which picks j with probability softmax(d)_j
    let dist = DMatrix::from_rows(&[vec![-0.2, -1.0, -1.7], vec![0.0, 0.0, -0.5]]).unwrap();
    let draws = 10_000;
    let a = gumbel_attention(&dist, 1e-9, 17, draws).unwrap();
    for i in 0..2 {
        let z: f64 = dist.row(i).iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            let p = dist.get(i, j).exp() / z;
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            let got = a.values().get(i, j);
            assert!((got - p).abs() <= 3.0 * sigma, "row {i} col {j}: {got} vs {p} (3 sigma {})", 3.0 * sigma);
        }
    }
}

#[test]
fn gumbel_average_variance_shrinks_with_draws() {
    let dist = DMatrix::from_rows(&[vec![-0.3, -0.9]]).unwrap();
    let spread = |draws: usize| {
        let samples: Vec<f64> =
            (0..400).map(|s| gumbel_attention(&dist, 0.5, s, draws).unwrap().values().get(0, 0)).collect();
        let m = samples.iter().sum::<f64>() / samples.len() as f64;
        samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64
    };
    let (v1, v16) = (spread(1), spread(16));
    // variance of a mean of 16 iid draws is 1/16 of one draw; allow sampling slack
    assert!(v16 < v1 / 8.0 && v16 > v1 / 32.0, "var(1) {v1}, var(16) {v16}");
}
