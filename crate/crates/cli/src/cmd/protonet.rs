use railmeta::meta::{
    draw_tasks, mean_accuracy, mean_episode_accuracy, meta_train, protonet_train, HyperParams, ProtoHyper,
};
use railmeta::nn::{build_model, InitPolicy};
use railmeta::rng::derive;
use railmeta::tasks::{MaskProvider, SceneSpec};
use railmeta::fmt17;
use serde::{Deserialize, Serialize};

use super::{desk_hyper, desk_scene, model_for, scenes, seeds};
use crate::run::{CliError, CliResult, Run};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneSpec,
    pub train_scenes: Vec<u64>,
    pub val_scenes: Vec<u64>,
    pub test_scenes: Vec<u64>,
    /// `shuffle_prob` and `dropout_keep` are set per technique row.
    pub hyper: HyperParams,
    pub proto: ProtoHyper,
    pub mask: MaskProvider,
    pub test_tasks: usize,
    pub init: InitPolicy,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scene: desk_scene(),
            train_scenes: seeds(100..108),
            val_scenes: seeds(108..110),
            test_scenes: seeds(110..115),
            hyper: desk_hyper(),
            proto: ProtoHyper::default(),
            mask: MaskProvider::SyntheticPolygon,
            test_tasks: 50,
            init: InitPolicy::Uniform,
        }
    }
}

/// Cumulative technique rows; ProtoNets has no linear layer to drop out.
const TECHNIQUES: [(&str, bool, bool, bool); 4] = [
    ("original", false, false, false),
    ("shuffling", true, false, false),
    ("shuffling+mask", true, false, true),
    ("shuffling+dropout+mask", true, true, true),
];

pub fn run(run: &mut Run, cfg: &Config) -> CliResult<()> {
    if cfg.test_tasks == 0 {
        return Err(CliError::Config("test_tasks must be positive".into()));
    }
    let shuffle = if cfg.hyper.shuffle_prob > 0.0 { cfg.hyper.shuffle_prob } else { 0.5 };
    let keep = cfg.hyper.dropout_keep.unwrap_or(0.7);
    let mut csv = String::from("technique,method,accuracy\n");
    for (r, &(name, shuf, drop, mask)) in TECHNIQUES.iter().enumerate() {
        let provider = mask.then_some(&cfg.mask);
        let train = scenes(&cfg.scene, &cfg.train_scenes, provider)?;
        let val = scenes(&cfg.scene, &cfg.val_scenes, provider)?;
        let test = scenes(&cfg.scene, &cfg.test_scenes, provider)?;
        let hp = HyperParams {
            shuffle_prob: if shuf { shuffle } else { 0.0 },
            dropout_keep: drop.then_some(keep),
            ..cfg.hyper.clone()
        };
        let channels = cfg.scene.channels + usize::from(mask);
        let tasks = draw_tasks(&test, cfg.test_tasks, hp.k, hp.q, 0.0, derive(run.seed, &[2]))?;
        let t = std::time::Instant::now();

        if !drop {
            let model = model_for(&cfg.scene, channels, None);
            let init = build_model(&model, cfg.init, derive(run.seed, &[0, r as u64]))?;
            let (state, _) = protonet_train(&model, &train, &val, &hp, &cfg.proto, init, derive(run.seed, &[1, r as u64]))?;
            let acc = mean_episode_accuracy(&model, &state.theta0, &tasks)?;
            csv += &format!("{name},protonets,{}\n", fmt17(acc));
            println!("{name:<24} protonets {acc:.4}");
        }
        let model = model_for(&cfg.scene, channels, hp.dropout_keep);
        let init = build_model(&model, cfg.init, derive(run.seed, &[0, r as u64]))?;
        let (state, _) = meta_train(&model, &train, &val, &hp, init, derive(run.seed, &[1, r as u64]))?;
        let acc = mean_accuracy(&model, &state.theta0, &tasks, &hp)?;
        csv += &format!("{name},proposed,{}\n", fmt17(acc));
        println!("{name:<24} proposed  {acc:.4}");
        run.time(&format!("{name}_seconds"), t.elapsed().as_secs_f64());
    }
    run.write("protonet.csv", csv.as_bytes())?;
    Ok(())
}
