//! Convolution as a sparse matrix, and closed-form predictions of how the
//! gradients of the single-filter model differ between two tasks.
//!
//! The model is [`ModelConfig::proof_model`](crate::nn::ModelConfig::proof_model):
//! an `M × M` filter `ω` over an `L × L` image, flattened into a bias-free
//! two-way head with columns `η₀`, `η₁`. Predictions are written against the
//! per-shot loss `(1/K) Σ_k (ℓ(x₊,k) + ℓ(x₋,k))`, twice the batch mean used
//! for training.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{ParamRole, ParameterSet};
use crate::tasks::TaskSet;
use crate::tensor::{norm2, Tensor};

/// Coordinate-format sparse matrix with entries sorted by `(row, col)`.
/// Explicit zeros are kept: they mark the structure of the operator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::pre(format!("sparse matrix must be nonempty, got {rows}x{cols}")));
        }
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::pre(format!("entry ({r}, {c}) outside {rows}x{cols}")));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        if let Some(w) = entries.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::pre(format!("duplicate entry ({}, {})", w[0].0, w[0].1)));
        }
        Ok(SparseMatrix { rows, cols, entries })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Structural entries per row.
    pub fn row_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.rows];
        for &(r, _, _) in &self.entries {
            n[r] += 1;
        }
        n
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::pre(format!("vector of length {} for {} columns", x.len(), self.cols)));
        }
        let mut y = vec![0.0; self.rows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        Ok(y)
    }

    /// `Dᵀ y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::pre(format!("vector of length {} for {} rows", y.len(), self.rows)));
        }
        let mut x = vec![0.0; self.cols];
        for &(r, c, v) in &self.entries {
            x[c] += v * y[r];
        }
        Ok(x)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for &(r, c, v) in &self.entries {
            d[r * self.cols + c] = v;
        }
        d
    }

    /// `row,col,value` lines under a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,value\n");
        for &(r, c, v) in &self.entries {
            let _ = writeln!(s, "{r},{c},{v:.17e}");
        }
        s
    }
}

fn filter_side(omega: &Tensor) -> Result<usize> {
    let n = omega.len();
    let m = (n as f64).sqrt().round() as usize;
    let s = omega.shape();
    if m * m != n || s[s.len() - 1] != m {
        return Err(Error::pre(format!("filter of shape {s:?} is not a single square kernel")));
    }
    Ok(m)
}

/// `D_ω`: `(L−M+1)² × L²`, so that `D_ω x̄` is the valid stride-1
/// convolution of the `L × L` image `x` with `ω`, flattened row-major.
pub fn toeplitz_from_filter(omega: &Tensor, l: usize) -> Result<SparseMatrix> {
    let m = filter_side(omega)?;
    if l < m {
        return Err(Error::pre(format!("image side {l} smaller than filter side {m}")));
    }
    let o = l - m + 1;
    let w = omega.data();
    let mut entries = Vec::with_capacity(o * o * m * m);
    for l1 in 0..o {
        for l2 in 0..o {
            for a in 0..m {
                for b in 0..m {
                    entries.push((l1 * o + l2, (l1 + a) * l + l2 + b, w[a * m + b]));
                }
            }
        }
    }
    SparseMatrix::new(o * o, l * l, entries)
}

/// `D_η`: `M² × L²`, so that `(D_η x̄)[a·M + b] = Σ η[l₁, l₂] x[l₁+a, l₂+b]`,
/// the filter-gradient pattern with upstream signal `η` on the feature map.
pub fn toeplitz_from_head(eta_c: &[f64], l: usize, m: usize) -> Result<SparseMatrix> {
    if m == 0 || l < m {
        return Err(Error::pre(format!("image side {l} and filter side {m}")));
    }
    let o = l - m + 1;
    if eta_c.len() != o * o {
        return Err(Error::pre(format!(
            "head column has {} entries, the feature map {}",
            eta_c.len(),
            o * o
        )));
    }
    let mut entries = Vec::with_capacity(m * m * o * o);
    for a in 0..m {
        for b in 0..m {
            for l1 in 0..o {
                for l2 in 0..o {
                    entries.push((a * m + b, (l1 + a) * l + l2 + b, eta_c[l1 * o + l2]));
                }
            }
        }
    }
    SparseMatrix::new(m * m, l * l, entries)
}

/// Filter and head of a proof-model parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProofWeights {
    /// `[M, M]`
    pub omega: Tensor,
    /// `[2, (L−M+1)²]`; row `c` is `η_c`.
    pub eta: Tensor,
}

impl ProofWeights {
    /// Reads the first convolution filter and the first linear weight.
    pub fn from_params(params: &ParameterSet) -> Result<Self> {
        let find = |prefix: &str| {
            params
                .layout()
                .iter()
                .find(|s| s.group.starts_with(prefix) && s.role == ParamRole::Weight)
                .map(|s| &params.values()[s.offset..s.offset + s.len])
                .ok_or_else(|| Error::pre(format!("parameter set has no {prefix} weight")))
        };
        let w = find("conv")?;
        let h = find("linear")?;
        let m = (w.len() as f64).sqrt().round() as usize;
        if m * m != w.len() || h.len() % 2 != 0 {
            return Err(Error::pre("not a single-filter, two-way model"));
        }
        Ok(ProofWeights {
            omega: Tensor::new(vec![m, m], w.to_vec())?,
            eta: Tensor::new(vec![2, h.len() / 2], h.to_vec())?,
        })
    }

    pub fn eta_c(&self, c: usize) -> &[f64] {
        let p = self.eta.shape()[1];
        &self.eta.data()[c * p..][..p]
    }
}

/// Predicted `∂(L_D⁰ − L_D¹)` for the head columns and the filter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradDiffPrediction {
    pub eta0_diff: Vec<f64>,
    pub eta1_diff: Vec<f64>,
    pub omega_diff: Vec<f64>,
}

/// Support images of both tasks, grouped by label role (`[1,0]` is "+").
struct Paired<'a> {
    l: usize,
    k: usize,
    plus: [Vec<&'a Tensor>; 2],
    minus: [Vec<&'a Tensor>; 2],
}

fn pair<'a>(t0: &'a TaskSet, t1: &'a TaskSet) -> Result<Paired<'a>> {
    for t in [t0, t1] {
        let g = t.geometry();
        if g.len() != 3 || g[0] != 1 || g[1] != g[2] {
            return Err(Error::pre(format!("expected single-channel square images, got {g:?}")));
        }
    }
    if t0.geometry() != t1.geometry() {
        return Err(Error::pre(format!(
            "task geometries {:?} and {:?} differ",
            t0.geometry(),
            t1.geometry()
        )));
    }
    let (p0, m0) = t0.support_by_label();
    let (p1, m1) = t1.support_by_label();
    if p0.len() != m0.len() || p1.len() != m1.len() || p0.len() != p1.len() {
        return Err(Error::pre(format!(
            "label groups of sizes {}/{} and {}/{}",
            p0.len(),
            m0.len(),
            p1.len(),
            m1.len()
        )));
    }
    Ok(Paired {
        l: t0.geometry()[1],
        k: p0.len(),
        plus: [p0, p1],
        minus: [m0, m1],
    })
}

/// `Σ_k (a_k − b_k)` over paired images.
fn summed_diff(a: &[&Tensor], b: &[&Tensor]) -> Vec<f64> {
    let mut acc = vec![0.0; a[0].len()];
    for (x, y) in a.iter().zip(b) {
        for ((s, u), v) in acc.iter_mut().zip(x.data()).zip(y.data()) {
            *s += u - v;
        }
    }
    acc
}

fn combine(a: Vec<f64>, b: Vec<f64>, scale: f64) -> Vec<f64> {
    a.into_iter().zip(b).map(|(x, y)| scale * (x + y)).collect()
}

/// Closed-form gradient differences between two tasks at `weights`.
///
/// Valid when both softmax outputs sit at `[0.5, 0.5]`; the head terms are
/// then exact for the per-shot loss, while the filter term keeps only the
/// direct path through each sample's own class column.
pub fn predict_grad_diffs(t0: &TaskSet, t1: &TaskSet, weights: &ProofWeights) -> Result<GradDiffPrediction> {
    let p = pair(t0, t1)?;
    let m = filter_side(&weights.omega)?;
    let d_omega = toeplitz_from_filter(&weights.omega, p.l)?;
    let scale = 1.0 / (2.0 * p.k as f64);

    let plus = summed_diff(&p.plus[1], &p.plus[0]);
    let minus = summed_diff(&p.minus[0], &p.minus[1]);
    let eta0_diff = combine(d_omega.matvec(&plus)?, d_omega.matvec(&minus)?, scale);
    let eta1_diff = eta0_diff.iter().map(|v| -v).collect();

    let d0 = toeplitz_from_head(weights.eta_c(0), p.l, m)?;
    let d1 = toeplitz_from_head(weights.eta_c(1), p.l, m)?;
    let minus_fwd = summed_diff(&p.minus[1], &p.minus[0]);
    let omega_diff = combine(d0.matvec(&plus)?, d1.matvec(&minus_fwd)?, scale);

    Ok(GradDiffPrediction {
        eta0_diff,
        eta1_diff,
        omega_diff,
    })
}

/// The prediction when the first task's class-to-label map is swapped, so
/// that `x¹₊` is paired with `x⁰₋` and `x¹₋` with `x⁰₊`.
pub fn shuffled_prediction(t0: &TaskSet, t1: &TaskSet, weights: &ProofWeights) -> Result<GradDiffPrediction> {
    predict_grad_diffs(&t0.with_labels_swapped(), t1, weights)
}

/// Head-column prediction with dropout masks `d0`, `d1` on the feature map
/// of each task: `(1/2K) Σ_k (d¹∘D_ω(x¹₊ − x¹₋) − d⁰∘D_ω(x⁰₊ − x⁰₋))`.
pub fn dropout_prediction(t0: &TaskSet, t1: &TaskSet, omega: &Tensor, d0: &[f64], d1: &[f64]) -> Result<Vec<f64>> {
    let p = pair(t0, t1)?;
    let d_omega = toeplitz_from_filter(omega, p.l)?;
    if d0.len() != d_omega.rows() || d1.len() != d_omega.rows() {
        return Err(Error::pre(format!("dropout masks must have {} entries", d_omega.rows())));
    }
    let scale = 1.0 / (2.0 * p.k as f64);
    let z1 = d_omega.matvec(&summed_diff(&p.plus[1], &p.minus[1]))?;
    let z0 = d_omega.matvec(&summed_diff(&p.plus[0], &p.minus[0]))?;
    Ok((0..z0.len()).map(|i| scale * (d1[i] * z1[i] - d0[i] * z0[i])).collect())
}

/// Largest singular value by power iteration on `DᵀD` from a fixed start.
/// Stops once the estimate moves by less than `tol` relative.
pub fn spectral_norm(d: &SparseMatrix, tol: f64, max_iters: usize) -> Result<f64> {
    let mut rng = crate::rng::rng(0x5eed_5eed);
    let mut v: Vec<f64> = (0..d.cols()).map(|_| rng.random_range(0.5..1.5)).collect();
    let n = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut sigma = norm2(&d.matvec(&v)?);
    for _ in 0..max_iters {
        if sigma == 0.0 {
            return Ok(0.0);
        }
        let mut w = d.matvec_t(&d.matvec(&v)?)?;
        let n = norm2(&w);
        if n == 0.0 {
            return Ok(0.0);
        }
        w.iter_mut().for_each(|x| *x /= n);
        v = w;
        let next = norm2(&d.matvec(&v)?);
        if (next - sigma).abs() <= tol * next {
            return Ok(next);
        }
        sigma = next;
    }
    Err(Error::Convergence {
        iterations: max_iters,
        last_estimate: sigma,
    })
}

/// Norm of the head-column prediction against its upper bound
/// `L · ‖D_ω‖₂ · Sim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub const BOUND_SLACK: f64 = 1e-9;

/// Stopping tolerance for `‖D_ω‖₂` in [`bound_check`]. The top singular
/// values of a convolution operator cluster tightly, so power iteration
/// creeps; a tighter tolerance mostly buys iterations.
pub const SPECTRAL_TOL: f64 = 1e-10;

/// Checks the bound for the tasks' support sets at filter `omega`. Frames are
/// grouped by label role, as in [`predict_grad_diffs`], which for unshuffled
/// tasks is the polarity grouping of
/// [`task_similarity`](crate::tasks::task_similarity).
pub fn bound_check(t0: &TaskSet, t1: &TaskSet, omega: &Tensor) -> Result<BoundCheck> {
    let p = pair(t0, t1)?;
    let d_omega = toeplitz_from_filter(omega, p.l)?;
    let plus = summed_diff(&p.plus[1], &p.plus[0]);
    let minus = summed_diff(&p.minus[0], &p.minus[1]);
    let scale = 1.0 / (2.0 * p.k as f64);
    let lhs = norm2(&combine(d_omega.matvec(&plus)?, d_omega.matvec(&minus)?, scale));
    let l = p.l as f64;
    let sim = (norm2(&plus) + norm2(&minus)) / (2.0 * p.k as f64 * l);
    let rhs = l * spectral_norm(&d_omega, SPECTRAL_TOL, 1_000_000)? * sim;
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + BOUND_SLACK),
    })
}
