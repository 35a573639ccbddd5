use railmeta::meta::draw_tasks;
use railmeta::tasks::{cross_similarity, SceneSpec, TaskSet};
use railmeta::{fmt17, rng::derive};
use serde::{Deserialize, Serialize};

use super::{desk_scene, scenes, seeds};
use crate::run::{CliError, CliResult, Run};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneSpec,
    pub scenes: Vec<u64>,
    pub tasks_per_scene: usize,
    pub k: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scene: desk_scene(),
            scenes: seeds(0..5),
            tasks_per_scene: 10,
            k: 10,
        }
    }
}

pub fn run(run: &mut Run, cfg: &Config) -> CliResult<()> {
    if cfg.tasks_per_scene == 0 || cfg.k == 0 {
        return Err(CliError::Config("tasks_per_scene and k must be positive".into()));
    }
    let gens = scenes(&cfg.scene, &cfg.scenes, None)?;
    let mut tasks: Vec<TaskSet> = Vec::new();
    for (i, g) in gens.iter().enumerate() {
        let seed = derive(run.seed, &[i as u64]);
        tasks.extend(draw_tasks(std::slice::from_ref(g), cfg.tasks_per_scene, cfg.k, 0, 0.0, seed)?);
    }
    let m = cross_similarity(&tasks)?;
    let mut csv = String::from("i,j,scene_i,scene_j,sim\n");
    for i in 0..m.size() {
        for j in 0..m.size() {
            csv += &format!("{i},{j},{},{},{}\n", m.scene_ids[i], m.scene_ids[j], fmt17(m.get(i, j)));
        }
    }
    run.write("simgrid.csv", csv.as_bytes())?;
    let (same, cross) = m.block_means();
    println!(
        "{} tasks: mean same-scene Sim {}, cross-scene Sim {}",
        m.size(),
        same.map_or("n/a".into(), |v| format!("{v:.6}")),
        cross.map_or("n/a".into(), |v| format!("{v:.6}"))
    );
    run.detail("same_scene_mean", same);
    run.detail("cross_scene_mean", cross);
    Ok(())
}
