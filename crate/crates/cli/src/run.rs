use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    /// A checked property failed; `detail` is the offending instance.
    Violation { message: String, detail: Option<Value> },
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Violation { .. } => 2,
            CliError::Io(_) => 3,
        }
    }

    fn status(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config_error",
            CliError::Violation { .. } => "violation",
            CliError::Io(_) => "io_error",
        }
    }

    pub fn violation(message: impl Into<String>, detail: Value) -> Self {
        CliError::Violation {
            message: message.into(),
            detail: Some(detail),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Violation { message, .. } => write!(f, "property violation: {message}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<railmeta::Error> for CliError {
    fn from(e: railmeta::Error) -> Self {
        use railmeta::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Io { path, source } => CliError::Io(format!("{}: {source}", path.display())),
            E::Numeric(_) | E::Convergence { .. } => CliError::Violation {
                message: e.to_string(),
                detail: None,
            },
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    bytes: usize,
    sha256: String,
}

/// Output directory bookkeeping for one subcommand invocation.
pub struct Run {
    pub name: &'static str,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    config: Value,
    outputs: Vec<OutputEntry>,
    details: Map<String, Value>,
    timing: Map<String, Value>,
    started: Instant,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Run {
    pub fn new(name: &'static str, out: PathBuf) -> Self {
        Run {
            name,
            out,
            seed: 0,
            workers: 1,
            config: Value::Null,
            outputs: Vec::new(),
            details: Map::new(),
            timing: Map::new(),
            started: Instant::now(),
        }
    }

    pub fn set_config(&mut self, config: Value) {
        self.config = config;
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    pub fn write(&mut self, file: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(file);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.record(file, bytes);
        Ok(())
    }

    fn record(&mut self, file: &str, bytes: &[u8]) {
        self.outputs.retain(|o| o.file != file);
        self.outputs.push(OutputEntry {
            file: file.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Registers a file some library routine wrote into the output directory.
    pub fn adopt(&mut self, file: &str) -> CliResult<()> {
        let path = self.path(file);
        let bytes = fs::read(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.record(file, &bytes);
        Ok(())
    }

    pub fn write_json(&mut self, file: &str, value: &impl Serialize) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        s.push('\n');
        self.write(file, s.as_bytes())
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details.insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn time(&mut self, key: &str, value: impl Serialize) {
        self.timing.insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    /// Writes `timing.json` and `manifest.json`. Errors here are reported but
    /// do not change the exit status of the run itself.
    pub fn finish(mut self, result: &CliResult<()>) {
        let elapsed = self.started.elapsed().as_secs_f64();
        self.timing.insert("wall_seconds".into(), json!(elapsed));
        let timing = Value::Object(std::mem::take(&mut self.timing));
        if let Err(e) = self.write_json("timing.json", &timing) {
            eprintln!("{e}");
        }
        let (status, code, error) = match result {
            Ok(()) => ("ok", 0, Value::Null),
            Err(e) => (e.status(), e.code(), json!(e.to_string())),
        };
        let violation = match result {
            Err(CliError::Violation { detail: Some(d), .. }) => d.clone(),
            _ => Value::Null,
        };
        let manifest = json!({
            "subcommand": self.name,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "workers": self.workers,
            "config": self.config,
            "status": status,
            "exit_code": code,
            "error": error,
            "violation": violation,
            "wall_seconds": elapsed,
            "details": Value::Object(self.details),
            "outputs": self.outputs,
        });
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).unwrap_or_default() + "\n";
        if let Err(e) = fs::write(&path, text) {
            eprintln!("i/o error: {}: {e}", path.display());
        }
    }
}

pub fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
