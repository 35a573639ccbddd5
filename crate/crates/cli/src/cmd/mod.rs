//! One module per subcommand: a serde config with desk-scale defaults and a
//! `run` entry point.

pub mod adapt;
pub mod inits;
pub mod prop1;
pub mod protonet;
pub mod simgrid;
pub mod toeplitz;
pub mod train;

use railmeta::meta::HyperParams;
use railmeta::nn::ModelConfig;
use railmeta::tasks::{generate_scene, MaskProvider, SceneGenerator, SceneSpec};

use crate::run::CliResult;

/// 24×32 frames: large enough for the f_θ¹ stack, small enough for one core.
pub fn desk_scene() -> SceneSpec {
    SceneSpec {
        height: 24,
        width: 32,
        ..SceneSpec::default()
    }
}

/// Published settings except the meta step size and the iteration budget,
/// scaled to minutes on one core.
pub fn desk_hyper() -> HyperParams {
    HyperParams {
        beta: 0.01,
        max_iters: 400,
        eval_every: 100,
        patience: 1000,
        val_tasks: 10,
        ..HyperParams::default()
    }
}

pub fn seeds(range: std::ops::Range<u64>) -> Vec<u64> {
    range.collect()
}

/// Scene generators for `seeds`, with the mask channel attached when a
/// provider is given.
pub fn scenes(spec: &SceneSpec, seeds: &[u64], mask: Option<&MaskProvider>) -> CliResult<Vec<SceneGenerator>> {
    seeds
        .iter()
        .map(|&s| {
            let g = generate_scene(spec, s)?;
            Ok(match mask {
                Some(p) => {
                    let m = p.mask_for(&g)?;
                    g.with_mask(m)?
                }
                None => g,
            })
        })
        .collect()
}

pub fn model_for(spec: &SceneSpec, channels: usize, keep: Option<f64>) -> ModelConfig {
    ModelConfig::f_theta_1(channels, spec.height, spec.width, keep)
}
