use railmeta::analysis::{prop1_experiment, Prop1Config};
use railmeta::fmt17;

use crate::run::{CliResult, Run};

pub type Config = Prop1Config;

fn rho(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), fmt17)
}

pub fn run(run: &mut Run, cfg: &Config) -> CliResult<()> {
    let t = std::time::Instant::now();
    let table = prop1_experiment(cfg, run.seed)?;
    run.time("experiment_seconds", t.elapsed().as_secs_f64());
    run.write("prop1_msecosine.csv", table.to_csv().as_bytes())?;
    let trends = table.trends();
    let mut csv = String::from("layer,n,mse_rho,neg_cosine_rho\n");
    for tr in &trends {
        csv += &format!("{},{},{},{}\n", tr.layer, tr.n, rho(tr.mse_rho), rho(tr.neg_cosine_rho));
        println!(
            "{:>8} n={} spearman mse {:>6} -cosine {:>6}",
            tr.layer,
            tr.n,
            tr.mse_rho.map_or("n/a".into(), |r| format!("{r:.3}")),
            tr.neg_cosine_rho.map_or("n/a".into(), |r| format!("{r:.3}"))
        );
    }
    run.write("prop1_trends.csv", csv.as_bytes())?;
    run.detail("trends", &trends);
    Ok(())
}
