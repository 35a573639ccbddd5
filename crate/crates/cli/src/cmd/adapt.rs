use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use railmeta::meta::{adapt_and_eval, draw_tasks, load_checkpoint, CheckpointMeta, HyperParams};
use railmeta::nn::{ModelConfig, ParameterSet};
use railmeta::rng::derive;
use railmeta::tasks::{MaskProvider, SceneGenerator, SceneSpec};
use railmeta::fmt17;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{desk_scene, scenes, seeds};
use crate::run::{CliError, CliResult, Run};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Stem of a 3-channel checkpoint (mask-off arm).
    pub checkpoint: Option<PathBuf>,
    /// Stem of a 4-channel checkpoint (mask-on arm).
    pub mask_checkpoint: Option<PathBuf>,
    pub mask: MaskProvider,
    pub scene: SceneSpec,
    pub test_scenes: Vec<u64>,
    pub shots: Vec<usize>,
    pub tasks: usize,
    pub q: usize,
    /// Adaptation steps; defaults to the checkpoint's `n_eval`.
    pub n_eval: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            checkpoint: None,
            mask_checkpoint: None,
            mask: MaskProvider::SyntheticPolygon,
            scene: desk_scene(),
            test_scenes: seeds(110..115),
            shots: (1..=5).collect(),
            tasks: 50,
            q: 15,
            n_eval: None,
        }
    }
}

pub struct Arm {
    pub params: ParameterSet,
    pub meta: CheckpointMeta,
    pub scenes: Vec<SceneGenerator>,
    pub with_mask: bool,
}

/// Loads a checkpoint and checks that its input matches `channels` × the
/// scene geometry.
pub fn load_arm(stem: &Path, spec: &SceneSpec, mask: Option<&MaskProvider>, test: &[u64]) -> CliResult<Arm> {
    let (params, meta) = load_checkpoint(stem)?;
    let channels = spec.channels + usize::from(mask.is_some());
    let want = [channels, spec.height, spec.width];
    if meta.config.input != want {
        return Err(CliError::Config(format!(
            "architecture mismatch: checkpoint {} expects input {:?}, config supplies {:?}",
            stem.display(),
            meta.config.input,
            want
        )));
    }
    Ok(Arm {
        params,
        meta,
        scenes: scenes(spec, test, mask)?,
        with_mask: mask.is_some(),
    })
}

pub fn arm_config(arm: &Arm) -> &ModelConfig {
    &arm.meta.config
}

pub fn run(run: &mut Run, cfg: &Config) -> CliResult<()> {
    if cfg.tasks == 0 || cfg.q == 0 || cfg.shots.is_empty() || cfg.shots.contains(&0) {
        return Err(CliError::Config("tasks, q and every shot count must be positive".into()));
    }
    let mut arms = Vec::new();
    if let Some(p) = &cfg.checkpoint {
        arms.push(load_arm(p, &cfg.scene, None, &cfg.test_scenes)?);
    }
    if let Some(p) = &cfg.mask_checkpoint {
        arms.push(load_arm(p, &cfg.scene, Some(&cfg.mask), &cfg.test_scenes)?);
    }
    if arms.is_empty() {
        return Err(CliError::Config("set `checkpoint` and/or `mask_checkpoint`".into()));
    }
    run.detail(
        "arms",
        arms.iter()
            .map(|a| json!({"with_mask": a.with_mask, "channels": a.meta.config.input[0]}))
            .collect::<Vec<_>>(),
    );

    let mut csv = String::from("K,fpr,fnr,accuracy,with_mask\n");
    let mut timing = Vec::new();
    for &k in &cfg.shots {
        for arm in &arms {
            let hp = HyperParams {
                k,
                q: cfg.q,
                n_eval: cfg.n_eval.unwrap_or(arm.meta.hyper.n_eval),
                ..arm.meta.hyper.clone()
            };
            let tasks = draw_tasks(&arm.scenes, cfg.tasks, k, cfg.q, 0.0, derive(run.seed, &[k as u64]))?;
            let t = Instant::now();
            let res = tasks
                .par_iter()
                .map(|task| adapt_and_eval(arm_config(arm), &arm.params, task, &hp))
                .collect::<railmeta::Result<Vec<_>>>()?;
            let secs = t.elapsed().as_secs_f64();
            let n = res.len() as f64;
            let mean = |f: fn(&railmeta::meta::EvalResult) -> f64| res.iter().map(f).sum::<f64>() / n;
            let (fpr, fnr, acc) = (mean(|r| r.fpr), mean(|r| r.fnr), mean(|r| r.accuracy));
            csv += &format!("{k},{},{},{},{}\n", fmt17(fpr), fmt17(fnr), fmt17(acc), arm.with_mask);
            println!("K={k} mask={:<5} accuracy {acc:.4} fpr {fpr:.4} fnr {fnr:.4}", arm.with_mask);
            timing.push(json!({
                "k": k,
                "with_mask": arm.with_mask,
                "seconds_per_task": secs / n,
                "seconds_per_query_image": secs / (n * 2.0 * cfg.q as f64),
            }));
        }
    }
    run.write("confusion.csv", csv.as_bytes())?;
    run.time("adapt_eval", timing);
    Ok(())
}
