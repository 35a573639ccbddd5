use std::path::PathBuf;

use railmeta::meta::{compare_inits, draw_tasks, InitArm};
use railmeta::nn::InitPolicy;
use railmeta::rng::derive;
use railmeta::tasks::{MaskProvider, SceneSpec};
use railmeta::fmt17;
use serde::{Deserialize, Serialize};

use super::adapt::load_arm;
use super::{desk_scene, seeds};
use crate::run::{CliError, CliResult, Run};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub checkpoint: Option<PathBuf>,
    /// Attach the mask channel (the checkpoint must take 4 channels).
    pub mask: Option<MaskProvider>,
    pub scene: SceneSpec,
    pub test_scenes: Vec<u64>,
    pub tasks: usize,
    pub k: usize,
    pub q: usize,
    pub steps: usize,
    /// Defaults to the checkpoint's inner learning rate.
    pub alpha: Option<f64>,
    pub random_init: InitPolicy,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            checkpoint: None,
            mask: None,
            scene: desk_scene(),
            test_scenes: seeds(110..115),
            tasks: 50,
            k: 5,
            q: 15,
            steps: 100,
            alpha: None,
            random_init: InitPolicy::Uniform,
        }
    }
}

pub fn run(run: &mut Run, cfg: &Config) -> CliResult<()> {
    let stem = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("`checkpoint` is required".into()))?;
    if cfg.tasks == 0 || cfg.k == 0 || cfg.q == 0 {
        return Err(CliError::Config("tasks, k and q must be positive".into()));
    }
    let arm = load_arm(stem, &cfg.scene, cfg.mask.as_ref(), &cfg.test_scenes)?;
    let alpha = cfg.alpha.unwrap_or(arm.meta.hyper.alpha);
    let tasks = draw_tasks(&arm.scenes, cfg.tasks, cfg.k, cfg.q, 0.0, derive(run.seed, &[0]))?;
    let random = InitArm::Fresh {
        policy: cfg.random_init,
        seed: derive(run.seed, &[1]),
    };
    let t = std::time::Instant::now();
    let curves = compare_inits(&arm.meta.config, &arm.params, &random, &tasks, alpha, cfg.steps)?;
    run.time("compare_seconds", t.elapsed().as_secs_f64());

    let mut csv = String::from("arm,step,accuracy\n");
    for (name, c) in [("meta", &curves.meta), ("random", &curves.random)] {
        for (s, a) in c.iter().enumerate() {
            csv += &format!("{name},{s},{}\n", fmt17(*a));
        }
    }
    run.write("init_curves.csv", csv.as_bytes())?;
    let last = cfg.steps;
    println!(
        "after {last} steps: meta {:.4}, random {:.4} ({} tasks)",
        curves.meta[last], curves.random[last], cfg.tasks
    );
    run.detail("final_meta", curves.meta[last]);
    run.detail("final_random", curves.random[last]);
    Ok(())
}
