mod common;

use common::{naive_conv, proof_task, random_tensor, rng, task_of};
use rand::Rng;
use railmeta::nn::{conv2d_forward, model_backward, model_forward, Mode, ModelConfig, ParamRole, ParameterSet};
use railmeta::tasks::{batch, TaskSet};
use railmeta::toeplitz::{
    bound_check, dropout_prediction, predict_grad_diffs, shuffled_prediction, spectral_norm, toeplitz_from_filter,
    toeplitz_from_head, ProofWeights, SparseMatrix,
};
use railmeta::Tensor;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn weights(l: usize, m: usize, seed: u64, tied: bool) -> ProofWeights {
    let o = l - m + 1;
    let omega = random_tensor(&[m, m], seed);
    let e0 = random_tensor(&[o * o], seed + 1);
    let e1 = if tied { e0.clone() } else { random_tensor(&[o * o], seed + 2) };
    let mut eta = e0.into_data();
    eta.extend_from_slice(e1.data());
    ProofWeights {
        omega,
        eta: Tensor::new(vec![2, o * o], eta).unwrap(),
    }
}

#[test]
fn filter_operator_matches_convolution() {
    let mut r = rng(11);
    for case in 0..100 {
        let m = r.random_range(1..=5);
        let l = r.random_range(m..=12);
        let omega = random_tensor(&[m, m], case);
        let x = random_tensor(&[1, l, l], case + 1000);
        let d = toeplitz_from_filter(&omega, l).unwrap();
        assert_eq!(d.rows(), (l - m + 1) * (l - m + 1));
        assert_eq!(d.cols(), l * l);
        assert!(d.row_counts().iter().all(|&n| n == m * m));
        let y = d.matvec(x.data()).unwrap();
        let z = conv2d_forward(&x, &omega.clone().reshape(&[1, 1, m, m]).unwrap(), 1, 0).unwrap();
        assert!(max_abs_diff(&y, z.data()) < 1e-9, "case {case}");
        let (naive, _, _) = naive_conv(x.data(), (1, l, l), omega.data(), 1, m, 1, 0);
        assert!(max_abs_diff(&y, &naive) < 1e-9);
    }
}

#[test]
fn head_operator_matches_correlation() {
    let mut r = rng(12);
    for case in 0..50 {
        let m = r.random_range(1..=5);
        let l = r.random_range(m..=12);
        let o = l - m + 1;
        let eta = random_tensor(&[o * o], case);
        let x = random_tensor(&[l, l], case + 77);
        let d = toeplitz_from_head(eta.data(), l, m).unwrap();
        assert!(d.row_counts().iter().all(|&n| n == o * o));
        let y = d.matvec(x.data()).unwrap();
        let mut oracle = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                for l1 in 0..o {
                    for l2 in 0..o {
                        oracle[a * m + b] += eta.data()[l1 * o + l2] * x.data()[(l1 + a) * l + l2 + b];
                    }
                }
            }
        }
        assert!(max_abs_diff(&y, &oracle) < 1e-9, "case {case}");
    }
    let zero = toeplitz_from_head(&[0.0; 9], 5, 3).unwrap();
    assert!(zero.matvec(&[1.0; 25]).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_tasks_predict_nothing() {
    let t = proof_task(3, 6, 1);
    let p = predict_grad_diffs(&t, &t, &weights(6, 3, 2, false)).unwrap();
    for v in [&p.eta0_diff, &p.eta1_diff, &p.omega_diff] {
        assert!(v.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn one_pixel_hand_case() {
    let delta = 0.75;
    let base = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let mut bumped = base.clone();
    bumped.data_mut()[2] += delta;
    let neg = Tensor::zeros(&[1, 2, 2]);
    let t0 = task_of(vec![bumped], vec![neg.clone()]);
    let t1 = task_of(vec![base], vec![neg]);
    let w = ProofWeights {
        omega: Tensor::filled(&[1, 1], 1.0),
        eta: Tensor::zeros(&[2, 4]),
    };
    let p = predict_grad_diffs(&t0, &t1, &w).unwrap();
    assert_eq!(p.eta0_diff, vec![0.0, 0.0, -delta / 2.0, 0.0]);
    assert_eq!(p.eta1_diff, vec![0.0, 0.0, delta / 2.0, 0.0]);
}

fn proof_params(l: usize, w: &ProofWeights) -> (ModelConfig, ParameterSet) {
    let cfg = ModelConfig::proof_model(l, w.omega.shape()[0]);
    let layout = railmeta::nn::layout(&cfg).unwrap();
    let mut values = w.omega.data().to_vec();
    values.extend_from_slice(w.eta.data());
    (cfg, ParameterSet::from_values(layout, values).unwrap())
}

/// Gradient of the per-shot loss `(1/K) Σ (ℓ₊ + ℓ₋)`, i.e. twice the batch mean.
fn per_shot_grad(cfg: &ModelConfig, params: &ParameterSet, t: &TaskSet) -> ParameterSet {
    let (x, y) = batch(&t.support).unwrap();
    let (_, trace) = model_forward(cfg, params, &x, Mode::Eval, None).unwrap();
    model_backward(&trace, &y).unwrap().scale(2.0)
}

#[test]
fn head_prediction_is_exact_when_columns_tie() {
    let mut r = rng(13);
    for case in 0..50 {
        let m = r.random_range(1..=4);
        let l = r.random_range(m + 1..=10);
        let k = r.random_range(1..=4);
        let w = weights(l, m, case * 7, true);
        let (t0, t1) = (proof_task(k, l, case * 2 + 1), proof_task(k, l, case * 2 + 2));
        let (cfg, params) = proof_params(l, &w);
        let g0 = per_shot_grad(&cfg, &params, &t0);
        let g1 = per_shot_grad(&cfg, &params, &t1);
        let head = |g: &ParameterSet| g.segment(2, ParamRole::Weight).unwrap().to_vec();
        let diff: Vec<f64> = head(&g0).iter().zip(head(&g1)).map(|(a, b)| a - b).collect();
        let o2 = (l - m + 1) * (l - m + 1);
        let p = predict_grad_diffs(&t0, &t1, &w).unwrap();
        assert!(max_abs_diff(&diff[..o2], &p.eta0_diff) < 1e-9, "case {case}");
        assert!(max_abs_diff(&diff[o2..], &p.eta1_diff) < 1e-9, "case {case}");

        // With tied columns the exact filter gradient vanishes: both logits move together.
        let wg = g0.segment(0, ParamRole::Weight).unwrap();
        assert!(wg.iter().all(|v| v.abs() < 1e-12));
    }
}

/// Filter-gradient difference built step by step from the derivation: upstream
/// `∂L/∂z̄ = −y₀p₁η₀ − y₁p₀η₁` at `p = [½, ½]`, correlated with the input.
fn chain_omega_diff(t0: &TaskSet, t1: &TaskSet, w: &ProofWeights) -> Vec<f64> {
    let m = w.omega.shape()[0];
    let l = t0.geometry()[1];
    let o = l - m + 1;
    let per_shot = |t: &TaskSet| {
        let mut g = vec![0.0; m * m];
        for f in &t.support {
            let (y0, y1) = (f.label[0], f.label[1]);
            let dz: Vec<f64> = (0..o * o)
                .map(|i| -y0 * 0.5 * w.eta_c(0)[i] - y1 * 0.5 * w.eta_c(1)[i])
                .collect();
            for a in 0..m {
                for b in 0..m {
                    for l1 in 0..o {
                        for l2 in 0..o {
                            g[a * m + b] += dz[l1 * o + l2] * f.image.data()[(l1 + a) * l + l2 + b];
                        }
                    }
                }
            }
        }
        g.iter().map(|v| v / t.k() as f64).collect::<Vec<_>>()
    };
    per_shot(t0).iter().zip(per_shot(t1)).map(|(a, b)| a - b).collect()
}

#[test]
fn filter_prediction_matches_derivation_chain() {
    let mut r = rng(14);
    for case in 0..50 {
        let m = r.random_range(1..=4);
        let l = r.random_range(m..=10);
        let k = r.random_range(1..=4);
        let w = weights(l, m, case * 5 + 3, case % 2 == 0);
        let (t0, t1) = (proof_task(k, l, case * 3 + 1), proof_task(k, l, case * 3 + 2));
        let p = predict_grad_diffs(&t0, &t1, &w).unwrap();
        assert!(max_abs_diff(&p.omega_diff, &chain_omega_diff(&t0, &t1, &w)) < 1e-9, "case {case}");
    }
}

#[test]
fn prediction_is_linear_in_pixel_difference() {
    let t0 = proof_task(2, 7, 40);
    let delta = proof_task(2, 7, 41);
    let w = weights(7, 3, 42, false);
    let shifted = |c: f64| {
        let mut t = t0.clone();
        for (f, d) in t.support.iter_mut().zip(&delta.support) {
            f.image = f.image.add(&d.image.scale(c)).unwrap();
        }
        t
    };
    let p1 = predict_grad_diffs(&t0, &shifted(1.0), &w).unwrap();
    let p3 = predict_grad_diffs(&t0, &shifted(3.0), &w).unwrap();
    for (a, b) in [(&p1.eta0_diff, &p3.eta0_diff), (&p1.omega_diff, &p3.omega_diff)] {
        let scaled: Vec<f64> = a.iter().map(|v| 3.0 * v).collect();
        assert!(max_abs_diff(&scaled, b) < 1e-12);
    }
}

#[test]
fn shuffled_prediction_swaps_the_first_task() {
    let (t0, t1) = (proof_task(3, 6, 50), proof_task(3, 6, 51));
    let w = weights(6, 2, 52, false);
    assert_eq!(
        shuffled_prediction(&t0, &t1, &w).unwrap(),
        predict_grad_diffs(&t0.with_labels_swapped(), &t1, &w).unwrap()
    );
    let zero = t0.map_images(|x| Tensor::zeros(x.shape()));
    let p = shuffled_prediction(&zero, &zero, &w).unwrap();
    assert!(p.omega_diff.iter().chain(&p.eta0_diff).all(|&v| v == 0.0));
}

#[test]
fn shuffling_densifies_sparse_filter_differences() {
    // Shared background; both tasks see an intruder at (1, 1) and a second one
    // that moves from (2, 2) to (2, 3). The head only looks at the top-left of
    // the feature map, so most filter coordinates see no intruder difference.
    let (l, m) = (8, 3);
    let o = l - m + 1;
    let bg = random_tensor(&[1, l, l], 60);
    let with_blobs = |spots: &[(usize, usize)]| {
        let mut x = bg.clone();
        for &(y, c) in spots {
            x.data_mut()[y * l + c] += 0.5;
        }
        x
    };
    let t0 = task_of(vec![with_blobs(&[(1, 1), (2, 2)])], vec![bg.clone()]);
    let t1 = task_of(vec![with_blobs(&[(1, 1), (2, 3)])], vec![bg.clone()]);
    let mut r = rng(61);
    let mut eta = vec![0.0; 2 * o * o];
    for c in 0..2 {
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            eta[c * o * o + y * o + x] = r.random_range(0.5..1.5);
        }
    }
    let w = ProofWeights {
        omega: random_tensor(&[m, m], 62),
        eta: Tensor::new(vec![2, o * o], eta).unwrap(),
    };
    let nonzero = |v: &[f64]| v.iter().filter(|x| x.abs() > 1e-12).count();
    let plain = nonzero(&predict_grad_diffs(&t0, &t1, &w).unwrap().omega_diff);
    let shuffled = nonzero(&shuffled_prediction(&t0, &t1, &w).unwrap().omega_diff);
    assert!(plain > 0);
    assert!(shuffled > plain, "{shuffled} vs {plain}");
}

#[test]
fn unit_dropout_masks_reduce_to_head_prediction() {
    let (t0, t1) = (proof_task(2, 6, 70), proof_task(2, 6, 71));
    let w = weights(6, 3, 72, false);
    let ones = vec![1.0; 16];
    let d = dropout_prediction(&t0, &t1, &w.omega, &ones, &ones).unwrap();
    let p = predict_grad_diffs(&t0, &t1, &w).unwrap();
    assert!(max_abs_diff(&d, &p.eta0_diff) < 1e-12);
    let zeros = vec![0.0; 16];
    assert!(dropout_prediction(&t0, &t1, &w.omega, &zeros, &zeros).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn spectral_norm_matches_long_run() {
    let mut r = rng(80);
    let mut entries = Vec::new();
    for i in 0..50 {
        for j in 0..80 {
            if r.random::<f64>() < 0.1 {
                entries.push((i, j, r.random_range(-1.0..1.0)));
            }
        }
    }
    let d = SparseMatrix::new(50, 80, entries).unwrap();
    let est = spectral_norm(&d, 1e-12, 20_000).unwrap();

    // Dense power iteration with ten times the budget.
    let dense = d.to_dense();
    let mut v = vec![1.0; 80];
    for _ in 0..200_000 {
        let dv: Vec<f64> = (0..50).map(|i| (0..80).map(|j| dense[i * 80 + j] * v[j]).sum()).collect();
        let mut w: Vec<f64> = (0..80).map(|j| (0..50).map(|i| dense[i * 80 + j] * dv[i]).sum()).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= n);
        if max_abs_diff(&w, &v) < 1e-15 {
            break;
        }
        v = w;
    }
    let oracle = (0..50)
        .map(|i| (0..80).map(|j| dense[i * 80 + j] * v[j]).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((est - oracle).abs() / oracle < 1e-6, "{est} vs {oracle}");
}

#[test]
fn bound_holds_on_random_pairs() {
    let mut r = rng(90);
    for case in 0..500 {
        let m = r.random_range(1..=5);
        let l = r.random_range(m..=12);
        let k = r.random_range(1..=5);
        let omega = random_tensor(&[m, m], case + 5000);
        let (t0, t1) = (proof_task(k, l, case * 2 + 9000), proof_task(k, l, case * 2 + 9001));
        let b = bound_check(&t0, &t1, &omega).unwrap_or_else(|e| panic!("case {case} m {m} l {l}: {e}"));
        assert!(b.holds, "case {case}: {} > {}", b.lhs, b.rhs);
        assert!(b.lhs > 0.0);
    }
}

#[test]
fn bound_on_identical_and_scaled_tasks() {
    let t = proof_task(3, 8, 100);
    let omega = random_tensor(&[3, 3], 101);
    let b = bound_check(&t, &t, &omega).unwrap();
    assert_eq!((b.lhs, b.rhs, b.holds), (0.0, 0.0, true));

    let u = proof_task(3, 8, 102);
    let base = bound_check(&t, &u, &omega).unwrap();
    for c in [0.25, 2.0] {
        let s = bound_check(&t.map_images(|x| x.scale(c)), &u.map_images(|x| x.scale(c)), &omega).unwrap();
        assert_eq!(s.lhs, c * base.lhs);
        assert_eq!(s.rhs, c * base.rhs);
    }
    let s = bound_check(&t.map_images(|x| x.scale(3.0)), &u.map_images(|x| x.scale(3.0)), &omega).unwrap();
    assert!((s.lhs / base.lhs - 3.0).abs() < 1e-12);
    assert!((s.rhs / base.rhs - 3.0).abs() < 1e-12);
}
