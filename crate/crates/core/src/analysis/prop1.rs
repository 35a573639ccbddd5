use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gradients::{gradient_compare, spearman};
use crate::error::{Error, Result};
use crate::fmt17;
use crate::meta::inner_adapt;
use crate::nn::{build_model, InitPolicy, ModelConfig, ParameterSet};
use crate::rng::derive;
use crate::tasks::{pool_task, prop1_family, synthetic_pool, ImagePool, FAMILY_K};

/// Settings of the replacement-family gradient experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Config {
    pub side: usize,
    pub channels: usize,
    pub filters: usize,
    pub pool_per_class: usize,
    pub trials: usize,
    pub steps: Vec<usize>,
    pub alpha: f64,
    /// On the 0–255 pixel scale.
    pub noise_var: f64,
    /// Family members compared against member 0.
    pub indices: Vec<usize>,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Prop1Config {
            side: 16,
            channels: 3,
            filters: 32,
            pool_per_class: 40,
            trials: 50,
            steps: vec![1, 5],
            alpha: 0.01,
            noise_var: 10.0,
            indices: (0..FAMILY_K).collect(),
        }
    }
}

impl Prop1Config {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.side == 0 || self.channels == 0 || self.filters == 0 {
            return Err(Error::config("side, channels and filters must be positive"));
        }
        if self.steps.is_empty() {
            return Err(Error::config("steps must not be empty"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha {} must be positive", self.alpha)));
        }
        if let Some(i) = self.indices.iter().find(|&&i| i >= FAMILY_K) {
            return Err(Error::config(format!("family index {i} outside 0..{FAMILY_K}")));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig::f_theta_0(self.channels, self.side, self.side, self.filters)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Row {
    pub i: usize,
    pub layer: String,
    pub n: usize,
    pub mse_mean: f64,
    pub cosine_mean: f64,
}

/// Rank correlation of the per-layer curves with the family index, over
/// indices ≥ 1. Cosine is reported negated so both read "≥ 0.9 is good".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub layer: String,
    pub n: usize,
    pub mse_rho: Option<f64>,
    pub neg_cosine_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Table {
    pub rows: Vec<Prop1Row>,
}

impl Prop1Table {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,layer,n,mse_mean,cosine_mean\n");
        for r in &self.rows {
            s += &format!("{},{},{},{},{}\n", r.i, r.layer, r.n, fmt17(r.mse_mean), fmt17(r.cosine_mean));
        }
        s
    }

    pub fn trends(&self) -> Vec<Trend> {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|(l, n)| *l == r.layer && *n == r.n) {
                keys.push((r.layer.clone(), r.n));
            }
        }
        keys.into_iter()
            .map(|(layer, n)| {
                let pts: Vec<&Prop1Row> = self.rows.iter().filter(|r| r.layer == layer && r.n == n && r.i >= 1).collect();
                let x: Vec<f64> = pts.iter().map(|r| r.i as f64).collect();
                let mse: Vec<f64> = pts.iter().map(|r| r.mse_mean).collect();
                let cos: Vec<f64> = pts.iter().map(|r| -r.cosine_mean).collect();
                Trend {
                    mse_rho: spearman(&x, &mse),
                    neg_cosine_rho: spearman(&x, &cos),
                    layer,
                    n,
                }
            })
            .collect()
    }
}

/// Summed inner-loop gradient `(θ₀ − θₙ)/α`.
fn summed_gradient(model: &ModelConfig, theta: &ParameterSet, task: &crate::tasks::TaskSet, alpha: f64, n: usize) -> Result<ParameterSet> {
    let adapted = inner_adapt(model, theta, &task.support, alpha, n, None, 0)?;
    Ok(theta.axpy(-1.0, &adapted)?.scale(1.0 / alpha))
}

/// One trial: per (index, n) the per-group (mse, cosine) against member 0.
fn trial(cfg: &Prop1Config, model: &ModelConfig, pool: &ImagePool, seed: u64) -> Result<Vec<Vec<(f64, f64)>>> {
    let base = pool_task(pool, FAMILY_K, 0, derive(seed, &[0]))?;
    let theta = build_model(model, InitPolicy::Uniform, derive(seed, &[1]))?;
    let fam_seed = derive(seed, &[2]);
    let mut out = Vec::new();
    for &n in &cfg.steps {
        let g0 = summed_gradient(model, &theta, &base, cfg.alpha, n)?;
        for &i in &cfg.indices {
            let gi = if i == 0 {
                g0.clone()
            } else {
                let task = prop1_family(&base, i, cfg.noise_var, fam_seed)?;
                summed_gradient(model, &theta, &task, cfg.alpha, n)?
            };
            let rep = gradient_compare(&g0, &gi)?;
            out.push(rep.groups.iter().map(|g| (g.mse, g.cosine)).collect());
        }
    }
    Ok(out)
}

/// Gradient differences between family member 0 and members `i` for each
/// inner step count, averaged over trials. Each trial draws its own base
/// task from the pool and its own random initialisation.
pub fn prop1_experiment(cfg: &Prop1Config, seed: u64) -> Result<Prop1Table> {
    cfg.validate()?;
    if cfg.pool_per_class < FAMILY_K {
        return Err(Error::config(format!(
            "pool_per_class {} below the {FAMILY_K} images a base task needs",
            cfg.pool_per_class
        )));
    }
    let pool = synthetic_pool(cfg.channels, cfg.side, cfg.pool_per_class, derive(seed, &[0]));
    prop1_experiment_on(cfg, &pool, seed)
}

/// As [`prop1_experiment`] on a caller-supplied pool.
pub fn prop1_experiment_on(cfg: &Prop1Config, pool: &ImagePool, seed: u64) -> Result<Prop1Table> {
    cfg.validate()?;
    let model = cfg.model();
    let groups: Vec<String> = crate::nn::build_model(&model, InitPolicy::Zeros, 0)?
        .groups()
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    let per_trial: Vec<Vec<Vec<(f64, f64)>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| trial(cfg, &model, pool, derive(seed, &[1, t as u64])))
        .collect::<Result<_>>()?;
    let t = cfg.trials as f64;
    let mut rows = Vec::new();
    let mut k = 0;
    for &n in &cfg.steps {
        for &i in &cfg.indices {
            for (g, layer) in groups.iter().enumerate() {
                let (mut m, mut c) = (0.0, 0.0);
                for tr in &per_trial {
                    m += tr[k][g].0;
                    c += tr[k][g].1;
                }
                rows.push(Prop1Row {
                    i,
                    layer: layer.clone(),
                    n,
                    mse_mean: m / t,
                    cosine_mean: c / t,
                });
            }
            k += 1;
        }
    }
    Ok(Prop1Table { rows })
}
