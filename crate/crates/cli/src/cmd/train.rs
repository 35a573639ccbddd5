use railmeta::meta::{meta_train, save_checkpoint, CheckpointMeta, HyperParams};
use railmeta::nn::{build_model, InitPolicy};
use railmeta::rng::derive;
use railmeta::tasks::{MaskProvider, SceneSpec};
use serde::{Deserialize, Serialize};

use super::{desk_hyper, desk_scene, model_for, scenes, seeds};
use crate::run::{CliError, CliResult, Run};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneSpec,
    pub train_scenes: Vec<u64>,
    pub val_scenes: Vec<u64>,
    pub hyper: HyperParams,
    pub init: InitPolicy,
    /// Appends the track mask as a 4th input channel.
    pub mask: Option<MaskProvider>,
    /// Checkpoint file stem inside the output directory.
    pub checkpoint: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scene: desk_scene(),
            train_scenes: seeds(100..108),
            val_scenes: seeds(108..110),
            hyper: desk_hyper(),
            init: InitPolicy::Uniform,
            mask: None,
            checkpoint: "theta0".into(),
        }
    }
}

pub fn run(run: &mut Run, cfg: &Config) -> CliResult<()> {
    if cfg.checkpoint.is_empty() || cfg.checkpoint.contains(['/', '\\']) {
        return Err(CliError::Config(format!("checkpoint stem {:?} must be a bare file name", cfg.checkpoint)));
    }
    cfg.hyper.validate()?;
    let train = scenes(&cfg.scene, &cfg.train_scenes, cfg.mask.as_ref())?;
    let val = scenes(&cfg.scene, &cfg.val_scenes, cfg.mask.as_ref())?;
    let channels = cfg.scene.channels + usize::from(cfg.mask.is_some());
    let model = model_for(&cfg.scene, channels, cfg.hyper.dropout_keep);
    let init = build_model(&model, cfg.init, derive(run.seed, &[0]))?;

    let t = std::time::Instant::now();
    let (state, log) = meta_train(&model, &train, &val, &cfg.hyper, init, derive(run.seed, &[1]))?;
    run.time("train_seconds", t.elapsed().as_secs_f64());
    run.time("iterations", state.iteration);

    run.write("train_log.csv", log.to_csv().as_bytes())?;
    let meta = CheckpointMeta {
        architecture: model.name.clone(),
        config: model.clone(),
        hyper: cfg.hyper.clone(),
        iteration: state.best_iter,
        val_acc: state.best_val_acc,
        seed: run.seed,
    };
    save_checkpoint(run.path(&cfg.checkpoint), &state.theta0, &meta)?;
    run.adopt(&format!("{}.rten", cfg.checkpoint))?;
    run.adopt(&format!("{}.json", cfg.checkpoint))?;

    run.detail("channels", channels);
    run.detail("parameters", state.theta0.len());
    run.detail("iterations", state.iteration);
    run.detail("best_iter", state.best_iter);
    run.detail("best_val_acc", state.best_val_acc);
    run.detail("passes", &log.passes);
    match state.best_val_acc {
        Some(a) => println!("best validation accuracy {a:.4} at iteration {} of {}", state.best_iter, state.iteration),
        None => println!("no validation round ran ({} iterations)", state.iteration),
    }
    Ok(())
}
