use rayon::prelude::*;
use serde::Serialize;

use super::hyper::HyperParams;
use crate::analysis::confusion_metrics;
use crate::error::{Error, Result};
use crate::nn::{
    argmax, build_model, draw_dropout_mask, model_backward, model_forward, sgd_step, DropoutMask, InitPolicy,
    LayerSpec, Mode, ModelConfig, ParameterSet,
};
use crate::rng::derive;
use crate::tasks::{batch, LabeledFrame, Polarity, TaskSet};

/// Head-input dropout for inner-loop training passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutPolicy {
    pub keep_prob: f64,
}

/// Forward passes split by whether a dropout mask was applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PassCounts {
    pub support_masked: usize,
    pub support_plain: usize,
    pub query_masked: usize,
    pub query_plain: usize,
}

impl PassCounts {
    pub fn add(&mut self, o: &PassCounts) {
        self.support_masked += o.support_masked;
        self.support_plain += o.support_plain;
        self.query_masked += o.query_masked;
        self.query_plain += o.query_plain;
    }
}

/// Input width of the dropout layer, if the model has one.
pub fn dropout_width(config: &ModelConfig) -> Result<Option<usize>> {
    let shapes = config.shapes()?;
    Ok(config
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Dropout { .. }))
        .map(|i| shapes[i].size()))
}

/// Mean loss and its gradient over `frames`. Dropout applies only when both
/// `mask` is given and the model has a dropout layer.
pub(crate) fn loss_grad(
    config: &ModelConfig,
    theta: &ParameterSet,
    frames: &[LabeledFrame],
    mask: Option<&DropoutMask>,
) -> Result<(f64, ParameterSet, Vec<[f64; 2]>)> {
    let (x, y) = batch(frames)?;
    let mode = if mask.is_some() { Mode::Train } else { Mode::Eval };
    let (_, trace) = model_forward(config, theta, &x, mode, mask)?;
    let loss = trace.mean_loss(&y)?;
    let g = model_backward(&trace, &y)?;
    Ok((loss, g, trace.probs()))
}

pub(crate) fn adapt_counted(
    config: &ModelConfig,
    theta: &ParameterSet,
    support: &[LabeledFrame],
    alpha: f64,
    steps: usize,
    dropout: Option<DropoutPolicy>,
    seed: u64,
    counts: &mut PassCounts,
) -> Result<ParameterSet> {
    let width = match dropout {
        Some(_) => dropout_width(config)?,
        None => None,
    };
    let mut cur = theta.clone();
    for step in 0..steps {
        let mask = match (dropout, width) {
            (Some(p), Some(w)) => Some(draw_dropout_mask(w, p.keep_prob, derive(seed, &[step as u64]))?),
            _ => None,
        };
        if mask.is_some() {
            counts.support_masked += 1;
        } else {
            counts.support_plain += 1;
        }
        let (_, g, _) = loss_grad(config, &cur, support, mask.as_ref())?;
        cur = sgd_step(&cur, &g, alpha)?;
    }
    Ok(cur)
}

/// `steps` plain gradient steps on the mean support loss. With a dropout
/// policy (and a dropout layer in the model) every step draws a new mask
/// from `seed`.
pub fn inner_adapt(
    config: &ModelConfig,
    theta: &ParameterSet,
    support: &[LabeledFrame],
    alpha: f64,
    steps: usize,
    dropout: Option<DropoutPolicy>,
    seed: u64,
) -> Result<ParameterSet> {
    adapt_counted(config, theta, support, alpha, steps, dropout, seed, &mut PassCounts::default())
}

/// Query performance of one adapted task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// NaN when the query holds no non-intrusive frame.
    pub fpr: f64,
    /// NaN when the query holds no intrusive frame.
    pub fnr: f64,
    /// Query accuracy after each adaptation step, step 0 first.
    pub trace: Vec<f64>,
    pub passes: PassCounts,
}

/// Polarity implied by a predicted class under the task's label map.
pub(crate) fn predicted_polarity(class: usize, shuffled: bool) -> Polarity {
    if Polarity::Intrusive.label(shuffled)[class] == 1.0 {
        Polarity::Intrusive
    } else {
        Polarity::NonIntrusive
    }
}

fn query_predictions(config: &ModelConfig, theta: &ParameterSet, task: &TaskSet) -> Result<Vec<Polarity>> {
    let (x, _) = batch(&task.query)?;
    let (_, trace) = model_forward(config, theta, &x, Mode::Eval, None)?;
    Ok(trace
        .probs()
        .into_iter()
        .map(|p| predicted_polarity(argmax(p), task.shuffled))
        .collect())
}

/// Adapts `theta0` to the task's support set for `steps` steps without
/// dropout and scores the query set against ground-truth polarity.
pub fn adapt_trace(config: &ModelConfig, theta0: &ParameterSet, task: &TaskSet, alpha: f64, steps: usize) -> Result<EvalResult> {
    if task.query.is_empty() {
        return Err(Error::pre("evaluation needs a query set"));
    }
    let truth: Vec<Polarity> = task.query.iter().map(|f| f.polarity).collect();
    let mut passes = PassCounts::default();
    let mut theta = theta0.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    let mut last = None;
    for step in 0..=steps {
        if step > 0 {
            theta = adapt_counted(config, &theta, &task.support, alpha, 1, None, 0, &mut passes)?;
        }
        let pred = query_predictions(config, &theta, task)?;
        passes.query_plain += 1;
        let m = confusion_metrics(&pred, &truth)?;
        trace.push(m.accuracy);
        last = Some(m);
    }
    let m = last.expect("at least one evaluation");
    Ok(EvalResult {
        accuracy: m.accuracy,
        fpr: m.fpr,
        fnr: m.fnr,
        trace,
        passes,
    })
}

pub fn adapt_and_eval(config: &ModelConfig, theta0: &ParameterSet, task: &TaskSet, hp: &HyperParams) -> Result<EvalResult> {
    adapt_trace(config, theta0, task, hp.alpha, hp.n_eval)
}

/// Mean of `adapt_and_eval` accuracy over tasks, evaluated in parallel.
pub fn mean_accuracy(config: &ModelConfig, theta0: &ParameterSet, tasks: &[TaskSet], hp: &HyperParams) -> Result<f64> {
    let accs = tasks
        .par_iter()
        .map(|t| adapt_and_eval(config, theta0, t, hp).map(|r| r.accuracy))
        .collect::<Result<Vec<_>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Starting point of the comparison arm.
#[derive(Debug, Clone)]
pub enum InitArm {
    /// One fixed parameter set for every task.
    Params(ParameterSet),
    /// A fresh draw per task, seeded by `derive(seed, [task index])`.
    Fresh { policy: InitPolicy, seed: u64 },
}

/// Mean per-step query accuracy from the meta initialisation and from the
/// comparison arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitCurves {
    pub meta: Vec<f64>,
    pub random: Vec<f64>,
}

pub fn compare_inits(
    config: &ModelConfig,
    meta_theta0: &ParameterSet,
    random: &InitArm,
    tasks: &[TaskSet],
    alpha: f64,
    steps: usize,
) -> Result<InitCurves> {
    if tasks.is_empty() {
        return Err(Error::pre("no tasks to compare on"));
    }
    let runs = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let start = match random {
                InitArm::Params(p) => p.clone(),
                InitArm::Fresh { policy, seed } => build_model(config, *policy, derive(*seed, &[i as u64]))?,
            };
            let m = adapt_trace(config, meta_theta0, t, alpha, steps)?;
            let r = adapt_trace(config, &start, t, alpha, steps)?;
            Ok((m.trace, r.trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        (0..=steps)
            .map(|s| runs.iter().map(|r| pick(r)[s]).sum::<f64>() / runs.len() as f64)
            .collect()
    };
    Ok(InitCurves {
        meta: mean(|r| &r.0),
        random: mean(|r| &r.1),
    })
}
