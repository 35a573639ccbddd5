use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapt::{predicted_polarity, EvalResult, PassCounts};
use super::hyper::HyperParams;
use super::train::{draw_tasks, early_stopping_loop, MetaState, StepStats, TrainLog};
use crate::analysis::confusion_metrics;
use crate::error::{Error, Result};
use crate::nn::{backward_from_output, forward_features, ModelConfig, ParameterSet};
use crate::rng::derive;
use crate::tasks::{batch, LabeledFrame, Polarity, SceneGenerator, TaskSet};

/// Adam settings for episodic training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoHyper {
    pub lr: f64,
    /// The learning rate halves after every this many training tasks.
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ProtoHyper {
    fn default() -> Self {
        ProtoHyper {
            lr: 5e-4,
            decay_every: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn embed(config: &ModelConfig, params: &ParameterSet, frames: &[LabeledFrame]) -> Result<(Vec<Vec<f64>>, usize)> {
    let (x, _) = batch(frames)?;
    let (f, _) = forward_features(config, params, &x)?;
    let d = f.shape()[1];
    Ok((f.data().chunks(d).map(<[f64]>::to_vec).collect(), d))
}

fn prototypes(emb: &[Vec<f64>], frames: &[LabeledFrame], d: usize) -> Result<([Vec<f64>; 2], [usize; 2])> {
    let mut c = [vec![0.0; d], vec![0.0; d]];
    let mut n = [0usize; 2];
    for (e, f) in emb.iter().zip(frames) {
        let k = usize::from(f.label[1] == 1.0);
        n[k] += 1;
        c[k].iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    if n.contains(&0) {
        return Err(Error::pre("support set lacks one of the two labels"));
    }
    for k in 0..2 {
        c[k].iter_mut().for_each(|v| *v /= n[k] as f64);
    }
    Ok((c, n))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Nearest-prototype classification of the query set; no fine-tuning.
/// Prototypes are the mean support embeddings per label; equal distances
/// go to label 0.
pub fn protonet_episode(config: &ModelConfig, params: &ParameterSet, task: &TaskSet) -> Result<EvalResult> {
    let (s, d) = embed(config, params, &task.support)?;
    let (c, _) = prototypes(&s, &task.support, d)?;
    let (q, _) = embed(config, params, &task.query)?;
    let pred: Vec<Polarity> = q
        .iter()
        .map(|e| predicted_polarity(usize::from(sq_dist(e, &c[1]) < sq_dist(e, &c[0])), task.shuffled))
        .collect();
    let truth: Vec<Polarity> = task.query.iter().map(|f| f.polarity).collect();
    let m = confusion_metrics(&pred, &truth)?;
    Ok(EvalResult {
        accuracy: m.accuracy,
        fpr: m.fpr,
        fnr: m.fnr,
        trace: vec![m.accuracy],
        passes: PassCounts {
            support_plain: 1,
            query_plain: 1,
            ..PassCounts::default()
        },
    })
}

/// Episode loss (mean cross-entropy of the softmax over negative squared
/// prototype distances) and its gradient, with the query accuracy against
/// the task labels.
pub fn episode_loss_grad(config: &ModelConfig, params: &ParameterSet, task: &TaskSet) -> Result<(f64, ParameterSet, f64)> {
    let (xs, _) = batch(&task.support)?;
    let (xq, _) = batch(&task.query)?;
    let (fs, ts) = forward_features(config, params, &xs)?;
    let (fq, tq) = forward_features(config, params, &xq)?;
    let d = fs.shape()[1];
    let s: Vec<&[f64]> = fs.data().chunks(d).collect();
    let q: Vec<&[f64]> = fq.data().chunks(d).collect();
    let s_owned: Vec<Vec<f64>> = s.iter().map(|r| r.to_vec()).collect();
    let (c, n) = prototypes(&s_owned, &task.support, d)?;

    let nq = q.len() as f64;
    let mut loss = 0.0;
    let mut hits = 0;
    let mut dq = vec![0.0; q.len() * d];
    let mut dc = [vec![0.0; d], vec![0.0; d]];
    for (j, (e, f)) in q.iter().zip(&task.query).enumerate() {
        let logits = [-sq_dist(e, &c[0]), -sq_dist(e, &c[1])];
        let top = logits[0].max(logits[1]);
        let z = (logits[0] - top).exp() + (logits[1] - top).exp();
        let p = [(logits[0] - top).exp() / z, (logits[1] - top).exp() / z];
        let y = f.label;
        loss -= (y[0] * (logits[0] - top) + y[1] * (logits[1] - top) - z.ln()) / nq;
        if f.label[usize::from(logits[1] > logits[0])] == 1.0 {
            hits += 1;
        }
        for k in 0..2 {
            let g = (p[k] - y[k]) / nq;
            for t in 0..d {
                let diff = e[t] - c[k][t];
                dq[j * d + t] -= 2.0 * g * diff;
                dc[k][t] += 2.0 * g * diff;
            }
        }
    }
    let mut ds = vec![0.0; s.len() * d];
    for (i, f) in task.support.iter().enumerate() {
        let k = usize::from(f.label[1] == 1.0);
        for t in 0..d {
            ds[i * d + t] = dc[k][t] / n[k] as f64;
        }
    }
    let mut grad = backward_from_output(&ts, &ds)?;
    grad.add_assign(&backward_from_output(&tq, &dq)?)?;
    Ok((loss, grad, hits as f64 / nq))
}

/// Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &ParameterSet, grad: &ParameterSet, lr: f64, h: &ProtoHyper) -> Result<ParameterSet> {
        if !params.same_layout(grad) || params.len() != self.m.len() {
            return Err(Error::pre("Adam buffers, parameters and gradient disagree in layout"));
        }
        self.t += 1;
        let (c1, c2) = (1.0 - h.beta1.powi(self.t), 1.0 - h.beta2.powi(self.t));
        let mut out = params.clone();
        for (i, (w, g)) in out.values_mut().iter_mut().zip(grad.values()).enumerate() {
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            *w -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + h.eps);
        }
        Ok(out)
    }
}

pub fn mean_episode_accuracy(config: &ModelConfig, params: &ParameterSet, tasks: &[TaskSet]) -> Result<f64> {
    let accs = tasks
        .par_iter()
        .map(|t| protonet_episode(config, params, t).map(|r| r.accuracy))
        .collect::<Result<Vec<_>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Episodic training of the embedding (all layers before the head) with
/// Adam, the learning rate halving every `ph.decay_every` tasks, and the
/// same early stopping as [`meta_train`](super::meta_train). Each iteration
/// averages the gradients of `hp.meta_batch` episodes.
pub fn protonet_train(
    config: &ModelConfig,
    train: &[SceneGenerator],
    val: &[SceneGenerator],
    hp: &HyperParams,
    ph: &ProtoHyper,
    init: ParameterSet,
    seed: u64,
) -> Result<(MetaState, TrainLog)> {
    hp.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("episodic training needs training and validation scenes"));
    }
    if !(ph.lr > 0.0) || ph.decay_every == 0 {
        return Err(Error::config(format!("protonet lr {} / decay_every {}", ph.lr, ph.decay_every)));
    }
    let val_pool = draw_tasks(val, hp.val_tasks, hp.k, hp.q, 0.0, derive(seed, &[1]))?;
    let mut adam = Adam::new(init.len());
    early_stopping_loop(
        MetaState::new(init, seed),
        hp,
        |state| {
            let tasks = draw_tasks(
                train,
                hp.meta_batch,
                hp.k,
                hp.q,
                hp.shuffle_prob,
                derive(seed, &[3, state.iteration as u64]),
            )?;
            let outs = tasks
                .par_iter()
                .map(|t| episode_loss_grad(config, &state.theta0, t))
                .collect::<Result<Vec<_>>>()?;
            let mut g = state.theta0.zeros_like();
            for o in &outs {
                g.add_assign(&o.1)?;
            }
            let n = outs.len() as f64;
            let seen = state.iteration * hp.meta_batch;
            let lr = ph.lr * 0.5f64.powi((seen / ph.decay_every) as i32);
            let theta0 = adam.step(&state.theta0, &g.scale(1.0 / n), lr, ph)?;
            let stats = StepStats {
                meta_loss: outs.iter().map(|o| o.0).sum::<f64>() / n,
                query_acc: outs.iter().map(|o| o.2).sum::<f64>() / n,
                passes: PassCounts {
                    support_plain: outs.len(),
                    query_plain: outs.len(),
                    ..PassCounts::default()
                },
            };
            Ok((
                MetaState {
                    theta0,
                    iteration: state.iteration + 1,
                    ..state.clone()
                },
                stats,
            ))
        },
        |theta| mean_episode_accuracy(config, theta, &val_pool),
    )
}
