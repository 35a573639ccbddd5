use rand::Rng;
use railmeta::nn::conv2d_forward;
use railmeta::rng::rng_at;
use railmeta::tasks::{LabeledFrame, Polarity, TaskSet};
use railmeta::toeplitz::{bound_check, toeplitz_from_filter};
use railmeta::{fmt17, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::run::{CliError, CliResult, Run};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Operator-equivalence instances.
    pub instances: usize,
    /// Inclusive frame side range.
    pub l_range: [usize; 2],
    /// Inclusive filter side range.
    pub m_range: [usize; 2],
    pub bound_pairs: usize,
    /// Largest shot count per class in bound-check tasks.
    pub max_shots: usize,
    pub tolerance: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            instances: 100,
            l_range: [5, 12],
            m_range: [1, 5],
            bound_pairs: 500,
            max_shots: 4,
            tolerance: 1e-9,
        }
    }
}

impl Config {
    fn validate(&self) -> CliResult<()> {
        let [l0, l1] = self.l_range;
        let [m0, m1] = self.m_range;
        if m0 == 0 || m0 > m1 || l0 > l1 {
            return Err(CliError::Config(format!("ranges l {:?} / m {:?}", self.l_range, self.m_range)));
        }
        if l0 < m1 {
            return Err(CliError::Config(format!("frame side L = {l0} can fall below filter side M = {m1}")));
        }
        if self.max_shots == 0 {
            return Err(CliError::Config("max_shots must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(CliError::Config(format!("tolerance {}", self.tolerance)));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn task(rng: &mut impl Rng, k: usize, l: usize) -> TaskSet {
    let support = [Polarity::Intrusive, Polarity::NonIntrusive]
        .into_iter()
        .flat_map(|p| (0..k).map(move |_| p))
        .map(|p| LabeledFrame::new(uniform(rng, &[1, l, l], 0.0, 1.0), p, false))
        .collect();
    TaskSet::new(support, vec![], false, 0).expect("balanced support")
}

#[derive(Serialize)]
struct Report {
    operator_instances: usize,
    operator_ok: usize,
    operator_max_abs_err: f64,
    operator_row_counts_ok: bool,
    bound_pairs: usize,
    bound_holds: usize,
    bound_max_ratio: f64,
}

pub fn run(run: &mut Run, cfg: &Config) -> CliResult<()> {
    cfg.validate()?;
    let seed = run.seed;

    let (mut max_err, mut ops_ok, mut rows_all) = (0.0f64, 0, true);
    let mut failure = None;
    for i in 0..cfg.instances {
        let mut rng = rng_at(seed, &[0, i as u64]);
        let m = rng.random_range(cfg.m_range[0]..=cfg.m_range[1]);
        let l = rng.random_range(cfg.l_range[0].max(m)..=cfg.l_range[1]);
        let omega = uniform(&mut rng, &[m, m], -1.0, 1.0);
        let x = uniform(&mut rng, &[1, l, l], -1.0, 1.0);
        let d = toeplitz_from_filter(&omega, l)?;
        if i == 0 {
            run.write("toeplitz_example.csv", d.to_csv().as_bytes())?;
        }
        let y = d.matvec(x.data())?;
        let z = conv2d_forward(&x, &omega.clone().reshape(&[1, 1, m, m])?, 1, 0)?;
        let err = y.iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        max_err = max_err.max(err);
        let rows_ok = d.row_counts().iter().all(|&n| n == m * m);
        rows_all &= rows_ok;
        if err < cfg.tolerance && rows_ok {
            ops_ok += 1;
        } else if failure.is_none() {
            failure = Some(json!({
                "check": "operator", "instance": i, "l": l, "m": m, "max_abs_err": err,
                "row_counts_ok": rows_ok, "omega": omega.data(), "x": x.data(),
            }));
        }
    }

    let mut csv = String::from("pair,l,m,k,lhs,rhs,holds\n");
    let (mut holds, mut max_ratio) = (0, 0.0f64);
    for p in 0..cfg.bound_pairs {
        let mut rng = rng_at(seed, &[1, p as u64]);
        let m = rng.random_range(cfg.m_range[0]..=cfg.m_range[1]);
        let l = rng.random_range(cfg.l_range[0].max(m)..=cfg.l_range[1]);
        let k = rng.random_range(1..=cfg.max_shots);
        let omega = uniform(&mut rng, &[m, m], -1.0, 1.0);
        let (t0, t1) = (task(&mut rng, k, l), task(&mut rng, k, l));
        let b = bound_check(&t0, &t1, &omega)?;
        csv += &format!("{p},{l},{m},{k},{},{},{}\n", fmt17(b.lhs), fmt17(b.rhs), b.holds);
        if b.rhs > 0.0 {
            max_ratio = max_ratio.max(b.lhs / b.rhs);
        }
        if b.holds {
            holds += 1;
        } else if failure.is_none() {
            let frames = |t: &TaskSet| t.support.iter().map(|f| f.image.data().to_vec()).collect::<Vec<_>>();
            failure = Some(json!({
                "check": "bound", "pair": p, "l": l, "m": m, "k": k, "lhs": b.lhs, "rhs": b.rhs,
                "omega": omega.data(), "task0": frames(&t0), "task1": frames(&t1),
            }));
        }
    }
    run.write("bound_checks.csv", csv.as_bytes())?;
    let report = Report {
        operator_instances: cfg.instances,
        operator_ok: ops_ok,
        operator_max_abs_err: max_err,
        operator_row_counts_ok: rows_all,
        bound_pairs: cfg.bound_pairs,
        bound_holds: holds,
        bound_max_ratio: max_ratio,
    };
    run.write_json("toeplitz_report.json", &report)?;
    println!("{ops_ok}/{} operator checks within {:e} (max {max_err:e})", cfg.instances, cfg.tolerance);
    println!("{holds}/{} bound checks hold", cfg.bound_pairs);
    run.detail("bound_holds", holds);
    match failure {
        None => Ok(()),
        Some(f) => {
            run.write_json("violation.json", &f)?;
            Err(CliError::violation(format!("{} check failed", f["check"]), f))
        }
    }
}
