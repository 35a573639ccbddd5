#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use railmeta::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Direct nested-loop convolution: x `[C,H,W]`, w `[F,C,M,M]`.
pub fn naive_conv(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    wt: &[f64],
    f: usize,
    m: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - m) / stride + 1;
    let ow = (w + 2 * pad - m) / stride + 1;
    let mut out = vec![0.0; f * oh * ow];
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..c {
                    for a in 0..m {
                        for b in 0..m {
                            let iy = (oy * stride + a) as isize - pad as isize;
                            let ix = (ox * stride + b) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += wt[((fi * c + ci) * m + a) * m + b]
                                * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(fi * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Central finite differences of `f` at `x`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps round-off in the
/// difference quotient of near-zero gradients from dominating.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Single-channel unshuffled task, `k` random `l × l` images per class.
pub fn proof_task(k: usize, l: usize, seed: u64) -> railmeta::tasks::TaskSet {
    let plus = (0..k).map(|i| random_tensor(&[1, l, l], seed * 1000 + i as u64)).collect();
    let minus = (0..k).map(|i| random_tensor(&[1, l, l], seed * 1000 + 500 + i as u64)).collect();
    task_of(plus, minus)
}

pub fn task_of(plus: Vec<Tensor>, minus: Vec<Tensor>) -> railmeta::tasks::TaskSet {
    use railmeta::tasks::{LabeledFrame, Polarity, TaskSet};
    let support = plus
        .into_iter()
        .map(|x| LabeledFrame::new(x, Polarity::Intrusive, false))
        .chain(minus.into_iter().map(|x| LabeledFrame::new(x, Polarity::NonIntrusive, false)))
        .collect();
    TaskSet::new(support, vec![], false, 0).unwrap()
}
