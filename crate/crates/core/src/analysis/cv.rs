use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt17;
use crate::meta::{draw_tasks, mean_accuracy, meta_train, HyperParams};
use crate::nn::{build_model, InitPolicy, ModelConfig};
use crate::rng::derive;
use crate::tasks::SceneGenerator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub folds: usize,
    /// Training-scene counts for the learning curve. Empty means only the
    /// full training split of each fold.
    pub scene_counts: Vec<usize>,
    /// Unshuffled tasks per accuracy estimate, on each side.
    pub eval_tasks: usize,
    pub init: InitPolicy,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 10,
            scene_counts: Vec::new(),
            eval_tasks: 50,
            init: InitPolicy::Uniform,
        }
    }
}

/// One point of a learning curve: means over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of training scenes.
    pub x: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Sample standard deviation of the per-fold validation accuracy.
    pub val_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub scenes: usize,
    pub val_scene_ids: Vec<u64>,
    pub train_acc: f64,
    pub val_acc: f64,
    pub best_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldScore>,
    pub curve: Vec<CurvePoint>,
}

impl CvReport {
    /// The point with the most training scenes.
    pub fn last(&self) -> &CurvePoint {
        self.curve.last().expect("cross_validate emits at least one point")
    }

    /// Train minus validation accuracy at the largest scene count.
    pub fn gap(&self) -> f64 {
        let p = self.last();
        p.train_acc - p.val_acc
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenes,train_acc,val_acc,val_std\n");
        for p in &self.curve {
            s += &format!("{},{},{},{}\n", p.x, fmt17(p.train_acc), fmt17(p.val_acc), fmt17(p.val_std));
        }
        s
    }
}

/// Scene `s` validates in fold `s mod folds`.
pub fn fold_partition(scenes: usize, folds: usize) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {folds}")));
    }
    if scenes < folds {
        return Err(Error::config(format!("{scenes} scenes cannot fill {folds} folds")));
    }
    Ok((0..folds).map(|f| (f..scenes).step_by(folds).collect()).collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Scene-level k-fold cross-validation of meta-training. For every fold and
/// scene count the model is meta-trained on the first `count` training
/// scenes, validated on the fold's held-out scenes, and scored by
/// adaptation accuracy on fresh unshuffled tasks from both sides.
///
/// Seeds depend on the scene count but not on the fold, so folds differ
/// only through their data.
pub fn cross_validate(
    config: &ModelConfig,
    scenes: &[SceneGenerator],
    hp: &HyperParams,
    opts: &CvOptions,
    seed: u64,
) -> Result<CvReport> {
    hp.validate()?;
    let parts = fold_partition(scenes.len(), opts.folds)?;
    if opts.eval_tasks == 0 {
        return Err(Error::config("eval_tasks must be at least 1"));
    }
    let min_train = scenes.len() - parts.iter().map(Vec::len).max().unwrap_or(0);
    let counts = if opts.scene_counts.is_empty() {
        vec![usize::MAX]
    } else {
        let mut c = opts.scene_counts.clone();
        c.sort_unstable();
        c.dedup();
        if c[0] == 0 || *c.last().unwrap() > min_train {
            return Err(Error::config(format!(
                "scene counts {:?} must lie in 1..={min_train}",
                opts.scene_counts
            )));
        }
        c
    };
    let init = build_model(config, opts.init, derive(seed, &[0]))?;

    let mut folds = Vec::new();
    let mut curve = Vec::new();
    for &count in &counts {
        let tag = count.min(scenes.len()) as u64;
        let scores = parts
            .par_iter()
            .enumerate()
            .map(|(f, val_idx)| {
                let val: Vec<SceneGenerator> = val_idx.iter().map(|&i| scenes[i].clone()).collect();
                let mut train: Vec<SceneGenerator> = (0..scenes.len())
                    .filter(|i| !val_idx.contains(i))
                    .map(|i| scenes[i].clone())
                    .collect();
                train.truncate(count);
                let (state, _) = meta_train(config, &train, &val, hp, init.clone(), derive(seed, &[1, tag]))?;
                let val_tasks = draw_tasks(&val, opts.eval_tasks, hp.k, hp.q, 0.0, derive(seed, &[2, tag]))?;
                let train_tasks = draw_tasks(&train, opts.eval_tasks, hp.k, hp.q, 0.0, derive(seed, &[3, tag]))?;
                Ok(FoldScore {
                    fold: f,
                    scenes: train.len(),
                    val_scene_ids: val.iter().map(|s| s.scene_id()).collect(),
                    train_acc: mean_accuracy(config, &state.theta0, &train_tasks, hp)?,
                    val_acc: mean_accuracy(config, &state.theta0, &val_tasks, hp)?,
                    best_iter: state.best_iter,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (train_acc, _) = mean_std(&scores.iter().map(|s| s.train_acc).collect::<Vec<_>>());
        let (val_acc, val_std) = mean_std(&scores.iter().map(|s| s.val_acc).collect::<Vec<_>>());
        curve.push(CurvePoint {
            x: scores.iter().map(|s| s.scenes).min().unwrap_or(0),
            train_acc,
            val_acc,
            val_std,
        });
        folds.extend(scores);
    }
    Ok(CvReport { folds, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_each_scene_once() {
        let p = fold_partition(7, 3).unwrap();
        assert_eq!(p, vec![vec![0, 3, 6], vec![1, 4], vec![2, 5]]);
        let mut all: Vec<usize> = p.concat();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(fold_partition(3, 4).is_err());
        assert!(fold_partition(3, 1).is_err());
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
