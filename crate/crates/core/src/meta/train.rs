use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use super::adapt::{adapt_counted, loss_grad, mean_accuracy, DropoutPolicy, PassCounts};
use super::hyper::HyperParams;
use crate::error::{Error, Result};
use crate::nn::{argmax, ModelConfig, ParameterSet};
use crate::rng::{derive, rng_at};
use crate::tasks::{build_task, SceneGenerator, TaskSet};

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub theta0: ParameterSet,
    /// Completed meta-updates.
    pub iteration: usize,
    pub best_val_acc: Option<f64>,
    pub best_iter: usize,
    pub best_theta: ParameterSet,
    /// Run seed; per-task streams derive from it.
    pub seed: u64,
}

impl MetaState {
    pub fn new(theta0: ParameterSet, seed: u64) -> Self {
        MetaState {
            best_theta: theta0.clone(),
            theta0,
            iteration: 0,
            best_val_acc: None,
            best_iter: 0,
            seed,
        }
    }
}

/// What one meta-update saw.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    /// Mean query loss at the adapted parameters.
    pub meta_loss: f64,
    /// Mean query accuracy against the task labels.
    pub query_acc: f64,
    pub passes: PassCounts,
}

struct TaskOutcome {
    grad: ParameterSet,
    loss: f64,
    acc: f64,
    passes: PassCounts,
}

fn run_task(config: &ModelConfig, theta0: &ParameterSet, task: &TaskSet, hp: &HyperParams, seed: u64) -> Result<TaskOutcome> {
    let mut passes = PassCounts::default();
    let dropout = hp.dropout_keep.map(|keep_prob| DropoutPolicy { keep_prob });
    let adapted = adapt_counted(config, theta0, &task.support, hp.alpha, hp.n_train, dropout, seed, &mut passes)?;
    let (loss, grad, probs) = loss_grad(config, &adapted, &task.query, None)?;
    passes.query_plain += 1;
    let hits = probs
        .iter()
        .zip(&task.query)
        .filter(|(p, f)| f.label[argmax(**p)] == 1.0)
        .count();
    Ok(TaskOutcome {
        grad,
        loss,
        acc: hits as f64 / task.query.len() as f64,
        passes,
    })
}

/// One first-order meta-update over `tasks`: each task adapts `θ₀` on its
/// support set, the query gradients at the adapted parameters are summed in
/// task order, and `θ₀ ← θ₀ − β Σ ∇`. Tasks run in parallel.
pub fn meta_step(config: &ModelConfig, state: &MetaState, tasks: &[TaskSet], hp: &HyperParams) -> Result<(MetaState, StepStats)> {
    if tasks.len() != hp.meta_batch {
        return Err(Error::pre(format!("{} tasks for a meta-batch of {}", tasks.len(), hp.meta_batch)));
    }
    let outcomes = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let seed = derive(state.seed, &[0, state.iteration as u64, i as u64]);
            run_task(config, &state.theta0, t, hp, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = state.theta0.zeros_like();
    let mut passes = PassCounts::default();
    for o in &outcomes {
        sum.add_assign(&o.grad)?;
        passes.add(&o.passes);
    }
    let n = outcomes.len() as f64;
    let next = MetaState {
        theta0: state.theta0.axpy(-hp.beta, &sum)?,
        iteration: state.iteration + 1,
        ..state.clone()
    };
    Ok((
        next,
        StepStats {
            meta_loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / n,
            query_acc: outcomes.iter().map(|o| o.acc).sum::<f64>() / n,
            passes,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean meta-training query accuracy since the previous row.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean meta-training query loss since the previous row.
    pub meta_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub passes: PassCounts,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,train_acc,val_acc,meta_loss\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration,
                crate::fmt17(r.train_acc),
                crate::fmt17(r.val_acc),
                crate::fmt17(r.meta_loss)
            ));
        }
        s
    }
}

/// Draws `n` tasks from scenes picked uniformly, reproducibly from `seed`.
pub fn draw_tasks(
    scenes: &[SceneGenerator],
    n: usize,
    k: usize,
    q: usize,
    shuffle_prob: f64,
    seed: u64,
) -> Result<Vec<TaskSet>> {
    if scenes.is_empty() {
        return Err(Error::config("no scenes to draw tasks from"));
    }
    (0..n)
        .map(|i| {
            let s = rng_at(seed, &[i as u64]).random_range(0..scenes.len());
            build_task(&scenes[s], k, q, shuffle_prob, derive(seed, &[i as u64, 1]))
        })
        .collect()
}

/// Runs `step` until `max_iters`, scoring `θ₀` with `validate` every
/// `eval_every` iterations and stopping after `patience` iterations without
/// a new best. The returned state holds the best `θ₀`.
pub(crate) fn early_stopping_loop(
    mut state: MetaState,
    hp: &HyperParams,
    mut step: impl FnMut(&MetaState) -> Result<(MetaState, StepStats)>,
    validate: impl Fn(&ParameterSet) -> Result<f64>,
) -> Result<(MetaState, TrainLog)> {
    let mut log = TrainLog::default();
    let (mut acc_sum, mut loss_sum, mut since) = (0.0, 0.0, 0usize);
    while state.iteration < hp.max_iters {
        let (next, stats) = step(&state)?;
        state = next;
        log.passes.add(&stats.passes);
        acc_sum += stats.query_acc;
        loss_sum += stats.meta_loss;
        since += 1;
        if state.iteration % hp.eval_every == 0 {
            let val_acc = validate(&state.theta0)?;
            log.rows.push(LogRow {
                iteration: state.iteration,
                train_acc: acc_sum / since as f64,
                val_acc,
                meta_loss: loss_sum / since as f64,
            });
            (acc_sum, loss_sum, since) = (0.0, 0.0, 0);
            if state.best_val_acc.is_none_or(|b| val_acc > b) {
                state.best_val_acc = Some(val_acc);
                state.best_iter = state.iteration;
                state.best_theta = state.theta0.clone();
            } else if state.iteration - state.best_iter >= hp.patience {
                break;
            }
        }
    }
    if state.best_val_acc.is_some() {
        state.theta0 = state.best_theta.clone();
    } else {
        state.best_theta = state.theta0.clone();
    }
    Ok((state, log))
}

/// Meta-training with early stopping. Tasks come from scenes picked
/// uniformly, with labels shuffled per `hp.shuffle_prob`; validation uses a
/// fixed pool of `hp.val_tasks` unshuffled tasks from the validation scenes.
pub fn meta_train(
    config: &ModelConfig,
    train: &[SceneGenerator],
    val: &[SceneGenerator],
    hp: &HyperParams,
    init: ParameterSet,
    seed: u64,
) -> Result<(MetaState, TrainLog)> {
    hp.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("meta-training needs training and validation scenes"));
    }
    let val_pool = draw_tasks(val, hp.val_tasks, hp.k, hp.q, 0.0, derive(seed, &[1]))?;
    early_stopping_loop(
        MetaState::new(init, seed),
        hp,
        |state| {
            let seed = derive(seed, &[2, state.iteration as u64]);
            let tasks = draw_tasks(train, hp.meta_batch, hp.k, hp.q, hp.shuffle_prob, seed)?;
            meta_step(config, state, &tasks, hp)
        },
        |theta| mean_accuracy(config, theta, &val_pool, hp),
    )
}
