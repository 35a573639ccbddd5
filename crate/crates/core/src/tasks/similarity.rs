use serde::Serialize;

use super::frame::TaskSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn summed_difference(a: &[&Tensor], b: &[&Tensor]) -> f64 {
    let mut acc = vec![0.0; a[0].len()];
    for (x, y) in a.iter().zip(b) {
        for ((s, u), v) in acc.iter_mut().zip(x.data()).zip(y.data()) {
            *s += u - v;
        }
    }
    crate::tensor::norm2(&acc)
}

/// Pixel-space dissimilarity of two tasks' support sets; 0 for identical
/// tasks, larger for less alike ones. The k-th intrusive frame of `a` is
/// paired with the k-th intrusive frame of `b` (likewise for the other
/// class), so the value depends on stored frame order.
pub fn task_similarity(a: &TaskSet, b: &TaskSet) -> Result<f64> {
    if a.k() != b.k() {
        return Err(Error::pre(format!("tasks have K = {} and K = {}", a.k(), b.k())));
    }
    if a.geometry() != b.geometry() {
        return Err(Error::pre(format!(
            "tasks have geometries {:?} and {:?}",
            a.geometry(),
            b.geometry()
        )));
    }
    let (ap, an) = a.support_by_polarity();
    let (bp, bn) = b.support_by_polarity();
    let n = a.geometry().iter().product::<usize>() as f64;
    let k = a.k() as f64;
    Ok((summed_difference(&ap, &bp) + summed_difference(&an, &bn)) / (2.0 * k * n.sqrt()))
}

/// Pairwise [`task_similarity`] over a task list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub scene_ids: Vec<u64>,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.scene_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    /// Mean off-diagonal value over pairs from the same scene and from
    /// different scenes. `None` where no such pair exists.
    pub fn block_means(&self) -> (Option<f64>, Option<f64>) {
        let n = self.size();
        let (mut same, mut cross) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let acc = if self.scene_ids[i] == self.scene_ids[j] { &mut same } else { &mut cross };
                acc.0 += self.get(i, j);
                acc.1 += 1;
            }
        }
        let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
        (mean(same), mean(cross))
    }
}

pub fn cross_similarity(tasks: &[TaskSet]) -> Result<SimilarityMatrix> {
    if tasks.len() < 2 {
        return Err(Error::pre("cross similarity needs at least two tasks"));
    }
    let n = tasks.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = task_similarity(&tasks[i], &tasks[j])?;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        scene_ids: tasks.iter().map(|t| t.scene_id).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{LabeledFrame, Polarity};

    fn task(pos: f64, neg: f64) -> TaskSet {
        TaskSet::new(
            vec![
                LabeledFrame::new(Tensor::filled(&[1, 1, 1], pos), Polarity::Intrusive, false),
                LabeledFrame::new(Tensor::filled(&[1, 1, 1], neg), Polarity::NonIntrusive, false),
            ],
            vec![],
            false,
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_pixel_hand_case() {
        assert_eq!(task_similarity(&task(3.0, 5.0), &task(1.0, 5.0)).unwrap(), 1.0);
        assert_eq!(task_similarity(&task(3.0, 5.0), &task(3.0, 5.0)).unwrap(), 0.0);
    }

    #[test]
    fn identical_pair_matrix_is_zero() {
        let m = cross_similarity(&[task(1.0, 2.0), task(1.0, 2.0)]).unwrap();
        assert_eq!(m.values, vec![0.0; 4]);
        assert!(cross_similarity(&[task(1.0, 2.0)]).is_err());
    }
}
