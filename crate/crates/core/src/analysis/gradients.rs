use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterSet;
use crate::tensor::{dot, norm2};

/// Difference between two gradients restricted to one reporting group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDiff {
    pub group: String,
    pub mse: f64,
    /// 0 when either side is the zero vector; see `cosine_defined`.
    pub cosine: f64,
    pub cosine_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    /// Layout order (`conv0`, `conv1`, …, `linear0`).
    pub groups: Vec<GroupDiff>,
}

impl GradientReport {
    pub fn group(&self, name: &str) -> Option<&GroupDiff> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Cosine similarity, defined as 0 (flag false) when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, false);
    }
    ((dot(a, b) / (na * nb)).clamp(-1.0, 1.0), true)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Per-group MSE and cosine between two gradients of one model.
pub fn gradient_compare(a: &ParameterSet, b: &ParameterSet) -> Result<GradientReport> {
    if !a.same_layout(b) {
        return Err(Error::pre("gradient layouts differ"));
    }
    let groups = a
        .groups()
        .into_iter()
        .zip(b.groups())
        .map(|((group, va), (_, vb))| {
            let (cosine, cosine_defined) = cosine(&va, &vb);
            GroupDiff {
                group,
                mse: mse(&va, &vb),
                cosine,
                cosine_defined,
            }
        })
        .collect();
    Ok(GradientReport { groups })
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0 + 1.0;
        for &i in &idx[s..=e] {
            r[i] = avg;
        }
        s = e + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks). `None` when the
/// lengths differ, fewer than two points are given, or either side is
/// constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| v.is_nan()) {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 25.0, 100.0]), Some(1.0));
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), None);
        assert_eq!(spearman(&x[..1], &x[..1]), None);
        // One swapped neighbour pair: 1 − 6·2/(4·15) = 0.8.
        let r = spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_zero_is_flagged() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), (0.0, false));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), (0.0, true));
    }
}
