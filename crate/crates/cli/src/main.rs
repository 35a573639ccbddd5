//! `railmeta` experiment runner. Every subcommand reads one JSON config,
//! writes its artifacts plus `timing.json` and `manifest.json` into the
//! output directory, and exits 0 (ok), 1 (configuration), 2 (property
//! violation) or 3 (I/O).

mod cmd;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use run::{CliError, CliResult, Run};

#[derive(Parser)]
#[command(name = "railmeta", version, about = "Few-shot intrusion detection laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory [default: $RAILMETA_OUT/<subcommand> or runs/<subcommand>].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; overrides the config's `workers` (default 1).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Audit the Toeplitz operator and the gradient-difference bound.
    ToeplitzCheck(Common),
    /// Gradient MSE/cosine against a replacement family of tasks.
    Prop1(Common),
    /// First-order meta-training with early stopping.
    MetaTrain(Common),
    /// FPR/FNR/accuracy per shot count, with and without the mask channel.
    AdaptEval(Common),
    /// Per-step accuracy from a meta initialisation and a random one.
    CompareInits(Common),
    /// Prototypical networks against the meta-learned detector.
    Protonet(Common),
    /// Cross-similarity matrix of tasks drawn from several scenes.
    Simgrid(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::ToeplitzCheck(c) => execute("toeplitz-check", &c, cmd::toeplitz::run),
        Command::Prop1(c) => execute("prop1", &c, cmd::prop1::run),
        Command::MetaTrain(c) => execute("meta-train", &c, cmd::train::run),
        Command::AdaptEval(c) => execute("adapt-eval", &c, cmd::adapt::run),
        Command::CompareInits(c) => execute("compare-inits", &c, cmd::inits::run),
        Command::Protonet(c) => execute("protonet", &c, cmd::protonet::run),
        Command::Simgrid(c) => execute("simgrid", &c, cmd::simgrid::run),
    };
    ExitCode::from(code)
}

fn out_dir(name: &str, flag: Option<&PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    match std::env::var_os("RAILMETA_OUT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(name),
        _ => PathBuf::from("runs").join(name),
    }
}

/// Parses the config document and applies flag overrides. Returns the typed
/// config and its fully resolved echo.
fn load<C: DeserializeOwned + Serialize>(run: &mut Run, common: &Common) -> CliResult<C> {
    let mut doc = match &common.config {
        Some(p) => serde_json::from_str::<Value>(&run::read_to_string(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => Value::Object(Default::default()),
    };
    let map = doc
        .as_object_mut()
        .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    let int = |v: Option<Value>, key: &str| -> CliResult<Option<u64>> {
        match v {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| CliError::Config(format!("`{key}` must be a non-negative integer"))),
        }
    };
    let seed = common.seed.or(int(map.remove("seed"), "seed")?).unwrap_or(0);
    let workers = common.workers.or(int(map.remove("workers"), "workers")?.map(|w| w as usize)).unwrap_or(1);
    if workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    run.seed = seed;
    run.workers = workers;
    let cfg: C = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    let mut echo = serde_json::to_value(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(m) = echo.as_object_mut() {
        m.insert("seed".into(), seed.into());
        m.insert("workers".into(), workers.into());
    }
    run.set_config(echo);
    Ok(cfg)
}

fn execute<C: DeserializeOwned + Serialize + Sync>(name: &'static str, common: &Common, body: fn(&mut Run, &C) -> CliResult<()>) -> u8 {
    let out = out_dir(name, common.out.as_ref());
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("i/o error: {}: {e}", out.display());
        return 3;
    }
    let mut run = Run::new(name, out);
    let result = load::<C>(&mut run, common).and_then(|cfg| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(run.workers)
            .build()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
        pool.install(|| body(&mut run, &cfg))
    });
    if let Err(e) = &result {
        eprintln!("{e}");
    }
    let code = result.as_ref().err().map_or(0, CliError::code);
    run.finish(&result);
    code as u8
}
